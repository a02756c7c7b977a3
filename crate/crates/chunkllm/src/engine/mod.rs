//! Chunk-sparse decoding.
//!
//! A `DecodeState` carries a two-tier KV cache: the cold store keeps every
//! token's K/V per layer (so evicted chunks are always recoverable
//! bit-exactly), while attention runs only over the active set — sink chunks,
//! the selected chunks, the last `m` completed chunks, and the open tail.
//! Chunk selection reruns only when the decoded token is a chunk boundary
//! (ICAC); the `full`, `streaming`, and `fixed_chunk` policies reuse the same
//! step loop with different active-set rules.

pub mod bench;
pub mod eval;
pub mod select;

pub use bench::{bench_latency, bench_prompt, rows_to_csv, BenchPolicy, BenchRow};
pub use eval::{eval_passkey, eval_ppl, PasskeyReport};

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{matvec, rmsnorm_vec, BackboneWeights, Sampler};
use crate::chunker::{build_chunk_map, ChunkAdapterParams, ChunkMap, DEFAULT_ALPHA};
use crate::chunkattn::QkAdapterParams;
use crate::numerics::{matmul_ex, rmsnorm, rope_freqs, rope_rotate_row, Elem, Tensor};
use crate::{Error, Result};

/// Cache policy under benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    ChunkLlm,
    Full,
    Streaming,
    FixedChunk,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::ChunkLlm => "chunkllm",
            Policy::Full => "full",
            Policy::Streaming => "streaming",
            Policy::FixedChunk => "fixed_chunk",
        }
    }

    fn selects_chunks(&self) -> bool {
        matches!(self, Policy::ChunkLlm | Policy::FixedChunk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMode {
    Ratio,
    Absolute,
}

/// Selection and retention knobs for one decode run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub policy: Policy,
    pub k_mode: KMode,
    pub k_ratio: f64,
    pub k_absolute: usize,
    /// Last `m` completed chunks always kept active.
    pub local_chunks: usize,
    /// First `s` completed chunks always kept active.
    pub sink_chunks: usize,
    pub vote_enabled: bool,
    pub icac_enabled: bool,
    pub fixed_chunk_len: usize,
    pub streaming_sink_tokens: usize,
    pub streaming_window_tokens: usize,
    /// Chunk-boundary threshold for the adapter detector.
    pub alpha: f64,
    /// Logging cadence for generated-token metrics in external sinks.
    pub metrics_every: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            policy: Policy::ChunkLlm,
            k_mode: KMode::Ratio,
            k_ratio: 0.45,
            k_absolute: 256,
            local_chunks: 15,
            sink_chunks: 1,
            vote_enabled: true,
            icac_enabled: true,
            fixed_chunk_len: 64,
            streaming_sink_tokens: 4,
            streaming_window_tokens: 512,
            alpha: DEFAULT_ALPHA,
            metrics_every: 256,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        match self.k_mode {
            KMode::Ratio if !(0.0 < self.k_ratio && self.k_ratio <= 1.0) => {
                return Err(Error::Config(format!("k_ratio {} outside (0, 1]", self.k_ratio)))
            }
            KMode::Absolute if self.k_absolute == 0 => {
                return Err(Error::Config("k_absolute must be >= 1".into()))
            }
            _ => {}
        }
        if self.policy == Policy::FixedChunk && self.fixed_chunk_len == 0 {
            return Err(Error::Config("fixed_chunk_len must be >= 1".into()));
        }
        if self.policy == Policy::Streaming && self.streaming_window_tokens == 0 {
            return Err(Error::Config("streaming_window_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Where chunk boundaries come from during decoding.
#[derive(Debug, Clone)]
pub enum BoundaryDetector {
    /// The trained Chunk Adapter thresholded at `cfg.alpha`.
    Adapter,
    /// Boundary at every position with `(pos + 1) % len == 0`.
    FixedInterval(usize),
    /// Explicit absolute token positions (scripted scenarios).
    Scripted(BTreeSet<usize>),
}

impl BoundaryDetector {
    fn wants_adapter(&self) -> bool {
        matches!(self, BoundaryDetector::Adapter)
    }

    fn is_boundary(
        &self,
        pos: usize,
        h1: &[f32],
        adapter: Option<&ChunkAdapterParams>,
        alpha: f64,
    ) -> bool {
        match self {
            BoundaryDetector::Adapter => {
                adapter.expect("validated at init").prob(h1) > alpha
            }
            BoundaryDetector::FixedInterval(len) => (pos + 1) % len == 0,
            BoundaryDetector::Scripted(set) => set.contains(&pos),
        }
    }
}

/// Adapters available to the engine; policies that never select chunks can
/// run without them.
#[derive(Debug, Clone, Copy, Default)]
pub struct AdapterSet<'a> {
    pub chunk: Option<&'a ChunkAdapterParams>,
    pub qk: Option<&'a QkAdapterParams>,
}

/// One per-step observation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(rename = "ctx")]
    pub context_len: usize,
    #[serde(rename = "active")]
    pub active_tokens: usize,
    pub retention: f64,
    #[serde(rename = "resel")]
    pub reselected: bool,
    pub ms: f64,
}

/// Everything a policy-specific decode state needs from the prompt pass:
/// per-layer cold K/V, layer-1 hidden states, the last token's queries, and
/// the last-row logits.
#[derive(Debug, Clone)]
pub struct PrefillArtifacts {
    pub n: usize,
    pub cold_k: Vec<Vec<f32>>,
    pub cold_v: Vec<Vec<f32>>,
    pub h_l1: Tensor,
    pub last_q: Vec<Vec<f32>>,
    pub last_logits: Vec<f32>,
    pub elapsed_ms: f64,
}

const PREFILL_BLOCK: usize = 256;

/// Full-attention forward over the prompt, row-blocked and parallel; keeps
/// per-layer K/V but never materializes the full attention matrix.
pub fn prefill_forward(w: &BackboneWeights, tokens: &[u8]) -> Result<PrefillArtifacts> {
    let started = Instant::now();
    let cfg = &w.config;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Input("prefill on empty prompt".into()));
    }
    if n > cfg.max_context {
        return Err(Error::Input(format!("{n} tokens exceed max_context {}", cfg.max_context)));
    }
    let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);
    let freqs = rope_freqs(dh, cfg.rope_base);
    let scale = (1.0 / (dh as f64).sqrt()) as f32;

    let mut x = Tensor::zeros(vec![n, d]);
    for (row, &t) in tokens.iter().enumerate() {
        x.data_mut()[row * d..(row + 1) * d].copy_from_slice(w.embed.row(t as usize));
    }

    let mut cold_k = Vec::with_capacity(cfg.n_layers);
    let mut cold_v = Vec::with_capacity(cfg.n_layers);
    let mut last_q = Vec::with_capacity(cfg.n_layers);
    let mut h_l1 = Tensor::zeros(vec![0]);
    for (li, layer) in w.layers.iter().enumerate() {
        let xn = rmsnorm(&x, &layer.norm1)?;
        let mut q = matmul_ex(&xn, false, &layer.wq, false)?;
        let mut k = matmul_ex(&xn, false, &layer.wk, false)?;
        let v = matmul_ex(&xn, false, &layer.wv, false)?;
        for row in 0..n {
            for h in 0..heads {
                rope_rotate_row(
                    &mut q.data_mut()[row * d + h * dh..row * d + (h + 1) * dh],
                    row,
                    &freqs,
                    false,
                );
                rope_rotate_row(
                    &mut k.data_mut()[row * d + h * dh..row * d + (h + 1) * dh],
                    row,
                    &freqs,
                    false,
                );
            }
        }

        let mut ctx = Tensor::<f32>::zeros(vec![n, d]);
        let kd = k.data();
        let vd = v.data();
        let qd = q.data();
        ctx.data_mut()
            .par_chunks_mut(PREFILL_BLOCK * d)
            .enumerate()
            .for_each(|(bi, ctx_block)| {
                let r0 = bi * PREFILL_BLOCK;
                let rows = ctx_block.len() / d;
                let hi = r0 + rows; // keys visible to the last row of the block
                let mut scores = vec![0f32; rows * hi];
                for h in 0..heads {
                    // scores = Q_blk_h x K_h^T over the first `hi` keys.
                    unsafe {
                        f32::gemm(
                            rows,
                            dh,
                            hi,
                            scale,
                            qd.as_ptr().add(r0 * d + h * dh),
                            d as isize,
                            1,
                            kd.as_ptr().add(h * dh),
                            1,
                            d as isize,
                            0.0,
                            scores.as_mut_ptr(),
                            hi as isize,
                            1,
                        );
                    }
                    for r in 0..rows {
                        let limit = r0 + r; // causal: keys 0..=limit
                        let row = &mut scores[r * hi..(r + 1) * hi];
                        let mut max = f32::NEG_INFINITY;
                        for &s in &row[..=limit] {
                            max = max.max(s);
                        }
                        let mut denom = 0f64;
                        for s in row[..=limit].iter_mut() {
                            *s = (*s - max).exp();
                            denom += *s as f64;
                        }
                        let inv = (1.0 / denom) as f32;
                        for s in row[..=limit].iter_mut() {
                            *s *= inv;
                        }
                        for s in row[limit + 1..].iter_mut() {
                            *s = 0.0;
                        }
                    }
                    // ctx_blk_h = probs x V_h
                    unsafe {
                        f32::gemm(
                            rows,
                            hi,
                            dh,
                            1.0,
                            scores.as_ptr(),
                            hi as isize,
                            1,
                            vd.as_ptr().add(h * dh),
                            d as isize,
                            1,
                            0.0,
                            ctx_block.as_mut_ptr().add(h * dh),
                            d as isize,
                            1,
                        );
                    }
                }
            });

        let proj = matmul_ex(&ctx, false, &layer.wo, false)?;
        for (a, b) in x.data_mut().iter_mut().zip(proj.data()) {
            *a += *b;
        }
        let xn2 = rmsnorm(&x, &layer.norm2)?;
        let mut up = matmul_ex(&xn2, false, &layer.w_up, false)?;
        for u in up.data_mut() {
            *u = crate::numerics::gelu_scalar(*u as f64) as f32;
        }
        let down = matmul_ex(&up, false, &layer.w_down, false)?;
        for (a, b) in x.data_mut().iter_mut().zip(down.data()) {
            *a += *b;
        }

        last_q.push(q.row(n - 1).to_vec());
        cold_k.push(k.data().to_vec());
        cold_v.push(v.data().to_vec());
        if li == 0 {
            h_l1 = x.clone();
        }
    }

    let xf = rmsnorm_vec(x.row(n - 1), w.final_norm.data());
    let mut last_logits = vec![0f32; cfg.vocab_size];
    for (vcb, l) in last_logits.iter_mut().enumerate() {
        *l = xf.iter().zip(w.embed.row(vcb)).map(|(a, b)| a * b).sum();
    }
    Ok(PrefillArtifacts {
        n,
        cold_k,
        cold_v,
        h_l1,
        last_q,
        last_logits,
        elapsed_ms: started.elapsed().as_secs_f64() * 1000.0,
    })
}

#[derive(Debug, Clone)]
struct SparseActive {
    /// Token positions of the core (sink ∪ selected ∪ local), ascending.
    core_idx: Vec<usize>,
    /// Per layer: compact K/V rows — core rows then tail rows.
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
struct StreamingActive {
    sink_cap: usize,
    sink_rows: usize,
    sink_k: Vec<Vec<f32>>,
    sink_v: Vec<Vec<f32>>,
    ring_cap: usize,
    ring_len: usize,
    ring_head: usize,
    ring_k: Vec<Vec<f32>>,
    ring_v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
enum ActiveMode {
    Full,
    Sparse(SparseActive),
    Streaming(StreamingActive),
}

/// A single-sequence decode in progress. Frozen weights and adapters are
/// shared; everything else is owned, so states clone cheaply enough to fan
/// out benchmark repetitions.
#[derive(Clone)]
pub struct DecodeState<'a> {
    weights: &'a BackboneWeights,
    chunk_adapter: Option<&'a ChunkAdapterParams>,
    qk: Option<&'a QkAdapterParams>,
    pub cfg: PolicyConfig,
    detector: BoundaryDetector,
    cold_k: Vec<Vec<f32>>,
    cold_v: Vec<Vec<f32>>,
    /// Per layer `[c][d_a]` compressed boundary keys.
    kbar: Vec<Vec<f32>>,
    cmap: ChunkMap,
    selected: Vec<usize>,
    active: ActiveMode,
    n_total: usize,
    last_logits: Vec<f32>,
    last_q: Vec<Vec<f32>>,
    freqs: Vec<f64>,
    pub log: Vec<MetricsRecord>,
    steps: usize,
}

impl<'a> DecodeState<'a> {
    /// Build the policy-specific state from shared prefill artifacts. For
    /// `fixed_chunk` the detector is overridden by fixed-length segmentation.
    pub fn new(
        weights: &'a BackboneWeights,
        adapters: AdapterSet<'a>,
        artifacts: &PrefillArtifacts,
        cfg: PolicyConfig,
        detector: BoundaryDetector,
    ) -> Result<Self> {
        cfg.validate()?;
        let detector = if cfg.policy == Policy::FixedChunk {
            BoundaryDetector::FixedInterval(cfg.fixed_chunk_len)
        } else {
            detector
        };
        if cfg.policy.selects_chunks() {
            if adapters.qk.is_none() {
                return Err(Error::Config(format!(
                    "policy {} needs QK adapters",
                    cfg.policy.name()
                )));
            }
            if detector.wants_adapter() && adapters.chunk.is_none() {
                return Err(Error::Config("adapter boundary detector needs a chunk adapter".into()));
            }
        }
        let n = artifacts.n;
        let n_layers = weights.config.n_layers;

        let mut state = DecodeState {
            weights,
            chunk_adapter: adapters.chunk,
            qk: adapters.qk,
            detector,
            cold_k: artifacts.cold_k.clone(),
            cold_v: artifacts.cold_v.clone(),
            kbar: vec![Vec::new(); n_layers],
            cmap: ChunkMap::default(),
            selected: Vec::new(),
            active: ActiveMode::Full,
            n_total: n,
            last_logits: artifacts.last_logits.clone(),
            last_q: artifacts.last_q.clone(),
            freqs: rope_freqs(weights.config.d_head, weights.config.rope_base),
            log: Vec::new(),
            steps: 0,
            cfg,
        };

        match state.cfg.policy {
            Policy::Full => {
                state.cmap = ChunkMap { boundaries: Vec::new(), n_tokens: n };
            }
            Policy::Streaming => {
                state.cmap = ChunkMap { boundaries: Vec::new(), n_tokens: n };
                state.active = ActiveMode::Streaming(state.build_streaming(n));
            }
            Policy::ChunkLlm | Policy::FixedChunk => {
                let labels = state.prompt_labels(artifacts)?;
                state.cmap = build_chunk_map(&labels);
                state.rebuild_kbar_all()?;
                if state.cmap.chunk_count() > 0 {
                    state.selected = state.run_selection();
                }
                state.active = ActiveMode::Sparse(state.build_sparse());
            }
        }
        let record = MetricsRecord {
            step: 0,
            context_len: n,
            active_tokens: state.active_token_count(),
            retention: state.retention(),
            reselected: state.cfg.policy.selects_chunks(),
            ms: artifacts.elapsed_ms,
        };
        state.log.push(record);
        Ok(state)
    }

    fn prompt_labels(&self, artifacts: &PrefillArtifacts) -> Result<Vec<u8>> {
        let n = artifacts.n;
        match &self.detector {
            BoundaryDetector::Adapter => {
                let adapter = self.chunk_adapter.expect("validated at init");
                crate::chunker::predict_boundaries(&artifacts.h_l1, adapter, self.cfg.alpha)
            }
            BoundaryDetector::FixedInterval(len) => {
                Ok((0..n).map(|i| u8::from((i + 1) % len == 0)).collect())
            }
            BoundaryDetector::Scripted(set) => {
                Ok((0..n).map(|i| u8::from(set.contains(&i))).collect())
            }
        }
    }

    /// Compressed boundary keys for every completed chunk, every layer.
    fn rebuild_kbar_all(&mut self) -> Result<()> {
        let Some(qk) = self.qk else { return Ok(()) };
        let d = self.weights.config.d_model;
        for li in 0..self.weights.config.n_layers {
            let params = &qk.layers[li];
            let mut flat = Vec::with_capacity(self.cmap.chunk_count() * params.wq.cols());
            for &b in &self.cmap.boundaries {
                let row = &self.cold_k[li][b * d..(b + 1) * d];
                flat.extend(params.k_feature(row));
            }
            self.kbar[li] = flat;
        }
        Ok(())
    }

    fn append_kbar_for_chunk(&mut self, boundary_pos: usize) {
        let Some(qk) = self.qk else { return };
        let d = self.weights.config.d_model;
        for li in 0..self.weights.config.n_layers {
            let row = &self.cold_k[li][boundary_pos * d..(boundary_pos + 1) * d];
            let feat = qk.layers[li].k_feature(row);
            self.kbar[li].extend(feat);
        }
    }

    fn run_selection(&self) -> Vec<usize> {
        let qk = self.qk.expect("selection policies validated at init");
        let d_a = qk.d_adapter();
        let c = self.cmap.chunk_count();
        let qbar: Vec<Vec<f32>> = (0..self.weights.config.n_layers)
            .map(|li| qk.layers[li].q_feature(&self.last_q[li]))
            .collect();
        let kbar_refs: Vec<&[f32]> = self.kbar.iter().map(|k| k.as_slice()).collect();
        select::select_chunks(&qbar, &kbar_refs, c, d_a, &self.cfg)
    }

    /// Core chunk set: sink ∪ selected ∪ last m completed chunks.
    fn core_chunks(&self) -> Vec<usize> {
        let c = self.cmap.chunk_count();
        let mut set = BTreeSet::new();
        for j in 0..self.cfg.sink_chunks.min(c) {
            set.insert(j);
        }
        for &j in &self.selected {
            set.insert(j);
        }
        let local_from = c.saturating_sub(self.cfg.local_chunks);
        for j in local_from..c {
            set.insert(j);
        }
        set.into_iter().collect()
    }

    fn build_sparse(&self) -> SparseActive {
        let d = self.weights.config.d_model;
        let core_chunks = self.core_chunks();
        let mut core_idx = Vec::new();
        for &j in &core_chunks {
            let (lo, hi) = self.cmap.chunk_span(j);
            core_idx.extend(lo..=hi);
        }
        let tail: Vec<usize> = (self.cmap.tail_start()..self.n_total).collect();
        let n_layers = self.weights.config.n_layers;
        let mut k = Vec::with_capacity(n_layers);
        let mut v = Vec::with_capacity(n_layers);
        for li in 0..n_layers {
            let mut kb = Vec::with_capacity((core_idx.len() + tail.len()) * d);
            let mut vb = Vec::with_capacity((core_idx.len() + tail.len()) * d);
            for &t in core_idx.iter().chain(&tail) {
                kb.extend_from_slice(&self.cold_k[li][t * d..(t + 1) * d]);
                vb.extend_from_slice(&self.cold_v[li][t * d..(t + 1) * d]);
            }
            k.push(kb);
            v.push(vb);
        }
        SparseActive { core_idx, k, v }
    }

    fn build_streaming(&self, n: usize) -> StreamingActive {
        let d = self.weights.config.d_model;
        let sink_cap = self.cfg.streaming_sink_tokens;
        let ring_cap = self.cfg.streaming_window_tokens;
        let sink_rows = sink_cap.min(n);
        let n_layers = self.weights.config.n_layers;
        let mut sink_k = Vec::with_capacity(n_layers);
        let mut sink_v = Vec::with_capacity(n_layers);
        let mut ring_k = Vec::with_capacity(n_layers);
        let mut ring_v = Vec::with_capacity(n_layers);
        // Ring receives tokens at positions >= sink_cap only, so sink and
        // window never overlap.
        let stream_tokens: Vec<usize> = (sink_cap.min(n)..n).collect();
        let kept = stream_tokens.len().min(ring_cap);
        let kept_slice = &stream_tokens[stream_tokens.len() - kept..];
        for li in 0..n_layers {
            let mut sk = Vec::with_capacity(sink_rows * d);
            let mut sv = Vec::with_capacity(sink_rows * d);
            for t in 0..sink_rows {
                sk.extend_from_slice(&self.cold_k[li][t * d..(t + 1) * d]);
                sv.extend_from_slice(&self.cold_v[li][t * d..(t + 1) * d]);
            }
            sink_k.push(sk);
            sink_v.push(sv);
            let mut rk = vec![0f32; ring_cap * d];
            let mut rv = vec![0f32; ring_cap * d];
            for (slot, &t) in kept_slice.iter().enumerate() {
                rk[slot * d..(slot + 1) * d]
                    .copy_from_slice(&self.cold_k[li][t * d..(t + 1) * d]);
                rv[slot * d..(slot + 1) * d]
                    .copy_from_slice(&self.cold_v[li][t * d..(t + 1) * d]);
            }
            ring_k.push(rk);
            ring_v.push(rv);
        }
        StreamingActive {
            sink_cap,
            sink_rows,
            sink_k,
            sink_v,
            ring_cap,
            ring_len: kept,
            ring_head: kept % ring_cap.max(1),
            ring_k,
            ring_v,
        }
    }

    pub fn context_len(&self) -> usize {
        self.n_total
    }

    pub fn last_logits(&self) -> &[f32] {
        &self.last_logits
    }

    pub fn chunk_map(&self) -> &ChunkMap {
        &self.cmap
    }

    pub fn selected_chunks(&self) -> &[usize] {
        &self.selected
    }

    /// Sorted original token positions of the current active set.
    pub fn active_token_indices(&self) -> Vec<usize> {
        match &self.active {
            ActiveMode::Full => (0..self.n_total).collect(),
            ActiveMode::Sparse(s) => {
                let mut idx = s.core_idx.clone();
                idx.extend(self.cmap.tail_start()..self.n_total);
                idx.sort_unstable();
                idx
            }
            ActiveMode::Streaming(s) => {
                let mut idx: Vec<usize> = (0..s.sink_rows).collect();
                let start = self.n_total - s.ring_len;
                idx.extend(start..self.n_total);
                idx
            }
        }
    }

    /// Non-tail part of the active set (the ICAC-invariant portion).
    pub fn active_core_indices(&self) -> Vec<usize> {
        match &self.active {
            ActiveMode::Sparse(s) => s.core_idx.clone(),
            _ => self.active_token_indices(),
        }
    }

    pub fn active_token_count(&self) -> usize {
        match &self.active {
            ActiveMode::Full => self.n_total,
            ActiveMode::Sparse(s) => s.core_idx.len() + (self.n_total - self.cmap.tail_start()),
            ActiveMode::Streaming(s) => s.sink_rows + s.ring_len,
        }
    }

    pub fn retention(&self) -> f64 {
        self.active_token_count() as f64 / self.n_total as f64
    }

    /// Gather one chunk's K/V from the cold store (eviction is logical; the
    /// cold tier keeps everything).
    pub fn chunk_kv(&self, layer: usize, chunk: usize) -> (Vec<f32>, Vec<f32>) {
        let d = self.weights.config.d_model;
        let (lo, hi) = self.cmap.chunk_span(chunk);
        (
            self.cold_k[layer][lo * d..(hi + 1) * d].to_vec(),
            self.cold_v[layer][lo * d..(hi + 1) * d].to_vec(),
        )
    }

    /// Feed one token; returns the logits predicting the next one.
    pub fn step(&mut self, token: u8) -> Result<&[f32]> {
        let started = Instant::now();
        let cfg = &self.weights.config;
        if self.n_total >= cfg.max_context {
            return Err(Error::Input(format!("context overflow at {}", self.n_total)));
        }
        let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);
        let pos = self.n_total;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = self.weights.embed.row(token as usize).to_vec();
        let mut h1: Vec<f32> = Vec::new();

        // Streaming bookkeeping advances once per token so every layer's
        // attention sees the freshly written row.
        let mut ring_slot = 0usize;
        if let ActiveMode::Streaming(s) = &mut self.active {
            if pos < s.sink_cap {
                s.sink_rows += 1;
            } else {
                ring_slot = s.ring_head;
                s.ring_head = (s.ring_head + 1) % s.ring_cap;
                s.ring_len = (s.ring_len + 1).min(s.ring_cap);
            }
        }

        for li in 0..cfg.n_layers {
            let layer = &self.weights.layers[li];
            let xn = rmsnorm_vec(&x, layer.norm1.data());
            let mut q = matvec(&xn, &layer.wq);
            let mut k = matvec(&xn, &layer.wk);
            let v = matvec(&xn, &layer.wv);
            for h in 0..heads {
                rope_rotate_row(&mut q[h * dh..(h + 1) * dh], pos, &self.freqs, false);
                rope_rotate_row(&mut k[h * dh..(h + 1) * dh], pos, &self.freqs, false);
            }
            self.cold_k[li].extend_from_slice(&k);
            self.cold_v[li].extend_from_slice(&v);
            match &mut self.active {
                ActiveMode::Full => {}
                ActiveMode::Sparse(s) => {
                    s.k[li].extend_from_slice(&k);
                    s.v[li].extend_from_slice(&v);
                }
                ActiveMode::Streaming(s) => {
                    if pos < s.sink_cap {
                        s.sink_k[li].extend_from_slice(&k);
                        s.sink_v[li].extend_from_slice(&v);
                    } else {
                        s.ring_k[li][ring_slot * d..(ring_slot + 1) * d].copy_from_slice(&k);
                        s.ring_v[li][ring_slot * d..(ring_slot + 1) * d].copy_from_slice(&v);
                    }
                }
            }

            // Attention over the active segments (which now include this
            // token's freshly appended K/V).
            let ctx = {
                let (k_segs, v_segs) = self.active_segments(li);
                attend_segments(&q, &k_segs, &v_segs, heads, dh, d, scale)
            };
            let proj = matvec(&ctx, &layer.wo);
            for (a, b) in x.iter_mut().zip(&proj) {
                *a += b;
            }
            let xn2 = rmsnorm_vec(&x, layer.norm2.data());
            let mut up = matvec(&xn2, &layer.w_up);
            for u in up.iter_mut() {
                *u = crate::numerics::gelu_scalar(*u as f64) as f32;
            }
            let down = matvec(&up, &layer.w_down);
            for (a, b) in x.iter_mut().zip(&down) {
                *a += b;
            }
            if li == 0 {
                h1 = x.clone();
            }
            self.last_q[li] = q;
        }
        self.n_total += 1;
        self.cmap.n_tokens = self.n_total;
        self.steps += 1;

        let xf = rmsnorm_vec(&x, self.weights.final_norm.data());
        let mut logits = vec![0f32; cfg.vocab_size];
        for (vcb, l) in logits.iter_mut().enumerate() {
            *l = xf.iter().zip(self.weights.embed.row(vcb)).map(|(a, b)| a * b).sum();
        }
        self.last_logits = logits;

        let mut reselected = false;
        if self.cfg.policy.selects_chunks() {
            let boundary =
                self.detector.is_boundary(pos, &h1, self.chunk_adapter, self.cfg.alpha);
            if boundary {
                self.cmap.boundaries.push(pos);
                self.append_kbar_for_chunk(pos);
            }
            if (boundary && self.cfg.icac_enabled) || !self.cfg.icac_enabled {
                if self.cmap.chunk_count() > 0 {
                    let new_selected = self.run_selection();
                    // Mid-chunk reselection (ICAC off) that lands on the same
                    // set leaves the active buffers already current.
                    let needs_rebuild = boundary || new_selected != self.selected;
                    self.selected = new_selected;
                    if needs_rebuild {
                        self.active = ActiveMode::Sparse(self.build_sparse());
                    }
                    reselected = true;
                }
            }
        }

        let record = MetricsRecord {
            step: self.steps,
            context_len: self.n_total,
            active_tokens: self.active_token_count(),
            retention: self.retention(),
            reselected,
            ms: started.elapsed().as_secs_f64() * 1000.0,
        };
        self.log.push(record);
        Ok(&self.last_logits)
    }

    /// Contiguous K/V memory segments covering the active set, in a fixed
    /// order (core then tail; sink then window).
    fn active_segments(&self, layer: usize) -> (Vec<&[f32]>, Vec<&[f32]>) {
        let d = self.weights.config.d_model;
        match &self.active {
            ActiveMode::Full => (
                vec![&self.cold_k[layer][..]],
                vec![&self.cold_v[layer][..]],
            ),
            ActiveMode::Sparse(s) => (vec![&s.k[layer][..]], vec![&s.v[layer][..]]),
            ActiveMode::Streaming(s) => {
                let mut ks: Vec<&[f32]> = vec![&s.sink_k[layer][..s.sink_rows * d]];
                let mut vs: Vec<&[f32]> = vec![&s.sink_v[layer][..s.sink_rows * d]];
                if s.ring_len == s.ring_cap && s.ring_head != 0 {
                    // Wrapped: oldest part first.
                    ks.push(&s.ring_k[layer][s.ring_head * d..]);
                    ks.push(&s.ring_k[layer][..s.ring_head * d]);
                    vs.push(&s.ring_v[layer][s.ring_head * d..]);
                    vs.push(&s.ring_v[layer][..s.ring_head * d]);
                } else {
                    ks.push(&s.ring_k[layer][..s.ring_len * d]);
                    vs.push(&s.ring_v[layer][..s.ring_len * d]);
                }
                (ks, vs)
            }
        }
    }
}

/// Single-token attention over concatenated memory segments.
fn attend_segments(
    q: &[f32],
    k_segs: &[&[f32]],
    v_segs: &[&[f32]],
    heads: usize,
    dh: usize,
    d: usize,
    scale: f64,
) -> Vec<f32> {
    let rows: usize = k_segs.iter().map(|s| s.len() / d).sum();
    let mut ctx = vec![0f32; d];
    let mut logits = vec![0f32; rows];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let mut max = f32::NEG_INFINITY;
        let mut r = 0usize;
        for seg in k_segs {
            for row in seg.chunks_exact(d) {
                let kr = &row[h * dh..(h + 1) * dh];
                let dot: f32 = qh.iter().zip(kr).map(|(a, b)| a * b).sum();
                let s = dot * scale as f32;
                logits[r] = s;
                max = max.max(s);
                r += 1;
            }
        }
        let mut denom = 0f64;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            denom += *l as f64;
        }
        let inv = (1.0 / denom) as f32;
        let out = &mut ctx[h * dh..(h + 1) * dh];
        let mut r = 0usize;
        for seg in v_segs {
            for row in seg.chunks_exact(d) {
                let p = logits[r] * inv;
                let vr = &row[h * dh..(h + 1) * dh];
                for (o, vv) in out.iter_mut().zip(vr) {
                    *o += p * vv;
                }
                r += 1;
            }
        }
    }
    ctx
}

/// Prefill + policy-specific initialization in one call.
pub fn prefill<'a>(
    weights: &'a BackboneWeights,
    adapters: AdapterSet<'a>,
    prompt: &[u8],
    cfg: &PolicyConfig,
    detector: &BoundaryDetector,
) -> Result<DecodeState<'a>> {
    let artifacts = prefill_forward(weights, prompt)?;
    DecodeState::new(weights, adapters, &artifacts, cfg.clone(), detector.clone())
}

/// Generate `n_new` tokens under the policy; returns tokens plus the
/// per-step metrics log (the prefill record is entry 0).
pub fn generate<'a>(
    weights: &'a BackboneWeights,
    adapters: AdapterSet<'a>,
    prompt: &[u8],
    n_new: usize,
    cfg: &PolicyConfig,
    detector: &BoundaryDetector,
    sampler: Sampler,
) -> Result<(Vec<u8>, Vec<MetricsRecord>)> {
    let mut state = prefill(weights, adapters, prompt, cfg, detector)?;
    let mut rng = sampler.rng();
    let mut out = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let next = sampler.sample(state.last_logits(), &mut rng);
        out.push(next);
        state.step(next)?;
    }
    Ok((out, state.log))
}
