//! QK adapters and attention distillation.
//!
//! Per layer, a Q-adapter maps each token's concatenated post-RoPE head
//! queries to a compact feature and a K-adapter does the same for the keys of
//! chunk-boundary tokens. Softmax over their scaled dot products is the
//! student chunk attention; the teacher is the backbone's full attention,
//! head-averaged and summed within chunks. Training minimizes KL(teacher ||
//! student) averaged over layers while the backbone stays frozen.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{concat_heads, forward_trace, BackboneWeights, ModelConfig, TrainConfig};
use crate::chunker::{build_chunk_map, ChunkMap};
use crate::corpus::{make_batches, LabeledDoc};
use crate::engine::select::{topk_indices, vote_global_topk};
use crate::numerics::{
    adam_step, matmul_ex, matvec_bias, AdamParams, AdamState, Graph, GraphMask, Tensor,
};
use crate::{Error, Result};

/// One layer's adapter pair.
#[derive(Debug, Clone, PartialEq)]
pub struct QkLayerParams {
    /// `[d_model, d_a]`
    pub wq: Tensor,
    /// `[d_a]`
    pub bq: Tensor,
    /// `[d_model, d_a]`
    pub wk: Tensor,
    /// `[d_a]`
    pub bk: Tensor,
}

impl QkLayerParams {
    /// Compress one concatenated-query row.
    pub fn q_feature(&self, q_row: &[f32]) -> Vec<f32> {
        matvec_bias(q_row, &self.wq, self.bq.data())
    }

    /// Compress one concatenated-key row.
    pub fn k_feature(&self, k_row: &[f32]) -> Vec<f32> {
        matvec_bias(k_row, &self.wk, self.bk.data())
    }
}

/// Per-layer Q/K adapters; the backbone stays frozen while these train.
#[derive(Debug, Clone, PartialEq)]
pub struct QkAdapterParams {
    pub layers: Vec<QkLayerParams>,
}

impl QkAdapterParams {
    pub fn init(cfg: &ModelConfig, d_a: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let mut mk = |rows: usize, cols: usize| -> Tensor {
            let data: Vec<f32> =
                (0..rows * cols).map(|_| rng.gen_range(-std..std) as f32).collect();
            Tensor::new(vec![rows, cols], data).expect("shape matches")
        };
        let layers = (0..cfg.n_layers)
            .map(|_| QkLayerParams {
                wq: mk(d, d_a),
                bq: Tensor::zeros(vec![d_a]),
                wk: mk(d, d_a),
                bk: Tensor::zeros(vec![d_a]),
            })
            .collect();
        QkAdapterParams { layers }
    }

    pub fn d_adapter(&self) -> usize {
        self.layers[0].wq.cols()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Checkpoint tensor names are 1-based: `qk_adapter.L{layer}.{part}`.
    pub fn to_named(&self, map: &mut BTreeMap<String, Tensor>) {
        for (i, l) in self.layers.iter().enumerate() {
            map.insert(format!("qk_adapter.L{}.wq", i + 1), l.wq.clone());
            map.insert(format!("qk_adapter.L{}.bq", i + 1), l.bq.clone());
            map.insert(format!("qk_adapter.L{}.wk", i + 1), l.wk.clone());
            map.insert(format!("qk_adapter.L{}.bk", i + 1), l.bk.clone());
        }
    }

    pub fn from_named(map: &BTreeMap<String, Tensor>, n_layers: usize) -> Result<Self> {
        let get = |name: String| -> Result<Tensor> {
            map.get(&name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))
        };
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            layers.push(QkLayerParams {
                wq: get(format!("qk_adapter.L{}.wq", i + 1))?,
                bq: get(format!("qk_adapter.L{}.bq", i + 1))?,
                wk: get(format!("qk_adapter.L{}.wk", i + 1))?,
                bk: get(format!("qk_adapter.L{}.bk", i + 1))?,
            });
        }
        Ok(QkAdapterParams { layers })
    }
}

/// Row-stochastic chunk attention over completed chunks, with a per-row
/// validity mask (a row is valid when at least two completed chunks are
/// visible to it).
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkAttention {
    /// `[n, c]`; invisible chunks are exactly 0; invalid rows are all 0.
    pub probs: Tensor,
    pub valid: Vec<bool>,
}

impl ChunkAttention {
    /// Count of chunks visible to row `i` (chunks are visible in index
    /// order, so this is a prefix length).
    pub fn visible(cmap: &ChunkMap, i: usize) -> usize {
        cmap.boundaries.partition_point(|&b| b <= i)
    }
}

/// Adapter features for one layer: per-token compressed queries `[n, d_a]`
/// and per-chunk compressed boundary keys `[c, d_a]`.
pub fn compress_inputs(
    q_heads: &Tensor,
    k_heads: &Tensor,
    cmap: &ChunkMap,
    params: &QkLayerParams,
) -> Result<(Tensor, Tensor)> {
    let q_cat = concat_heads(q_heads);
    let k_cat = concat_heads(k_heads);
    let n = q_cat.rows();
    if cmap.n_tokens != n {
        return Err(Error::Shape {
            op: "compress_inputs",
            detail: format!("chunk map over {} tokens, trace has {n}", cmap.n_tokens),
        });
    }
    if q_cat.cols() != params.wq.rows() {
        return Err(Error::Shape {
            op: "compress_inputs",
            detail: format!("feature width {} vs adapter {}", q_cat.cols(), params.wq.rows()),
        });
    }
    let qbar = affine(&q_cat, &params.wq, &params.bq)?;
    let c = cmap.chunk_count();
    let d = k_cat.cols();
    let mut k_bound = Tensor::zeros(vec![c, d]);
    for (j, &b) in cmap.boundaries.iter().enumerate() {
        k_bound.data_mut()[j * d..(j + 1) * d].copy_from_slice(k_cat.row(b));
    }
    let kbar = affine(&k_bound, &params.wk, &params.bk)?;
    Ok((qbar, kbar))
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = matmul_ex(x, false, w, false)?;
    let cols = out.cols();
    for r in 0..out.rows() {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += *bb;
        }
    }
    Ok(out)
}

/// Student chunk attention for one layer: softmax over
/// `Q̄_i · K̄_j / sqrt(d_a)` across the chunks visible to each row.
pub fn student_attention(qbar: &Tensor, kbar: &Tensor, cmap: &ChunkMap) -> Result<ChunkAttention> {
    let n = qbar.rows();
    let c = kbar.rows();
    if c != cmap.chunk_count() {
        return Err(Error::Shape {
            op: "student_attention",
            detail: format!("{c} key rows vs {} chunks", cmap.chunk_count()),
        });
    }
    let d_a = qbar.cols();
    let scale = 1.0 / (d_a as f64).sqrt();
    let scores = matmul_ex(qbar, false, kbar, true)?; // [n, c]
    let mut probs = Tensor::zeros(vec![n, c]);
    let mut valid = vec![false; n];
    for i in 0..n {
        let vis = ChunkAttention::visible(cmap, i);
        if vis < 2 {
            continue;
        }
        valid[i] = true;
        let row = scores.row(i);
        let mut max = f64::NEG_INFINITY;
        for &s in &row[..vis] {
            max = max.max(s as f64 * scale);
        }
        let mut denom = 0.0f64;
        let out = &mut probs.data_mut()[i * c..i * c + vis];
        for (j, o) in out.iter_mut().enumerate() {
            let e = (row[j] as f64 * scale - max).exp();
            *o = e as f32;
            denom += e;
        }
        let inv = (1.0 / denom) as f32;
        for o in out.iter_mut() {
            *o *= inv;
        }
    }
    Ok(ChunkAttention { probs, valid })
}

/// Teacher chunk attention for one layer: average full attention over heads,
/// sum within each completed chunk, drop open-tail mass, renormalize.
pub fn aggregate_teacher(attn: &Tensor, cmap: &ChunkMap) -> Result<ChunkAttention> {
    if attn.shape().len() != 3 || attn.shape()[1] != attn.shape()[2] {
        return Err(Error::Shape {
            op: "aggregate_teacher",
            detail: format!("expected [heads, n, n], got {:?}", attn.shape()),
        });
    }
    let (h, n) = (attn.shape()[0], attn.shape()[1]);
    if cmap.n_tokens != n {
        return Err(Error::Shape {
            op: "aggregate_teacher",
            detail: format!("chunk map over {} tokens, attention has {n}", cmap.n_tokens),
        });
    }
    let c = cmap.chunk_count();
    let mut probs = Tensor::zeros(vec![n, c]);
    let mut valid = vec![false; n];
    let inv_h = 1.0 / h as f64;
    for i in 0..n {
        let vis = ChunkAttention::visible(cmap, i);
        if vis < 2 {
            continue;
        }
        valid[i] = true;
        // Head-averaged row, accumulated in f64.
        let mut sums = vec![0.0f64; vis];
        let mut total = 0.0f64;
        for head in 0..h {
            let row = &attn.data()[(head * n + i) * n..(head * n + i) * n + n];
            for (j, s) in sums.iter_mut().enumerate() {
                let (lo, hi) = cmap.chunk_span(j);
                for &a in &row[lo..=hi] {
                    *s += a as f64 * inv_h;
                }
            }
            for &a in row[..=i].iter() {
                total += a as f64 * inv_h;
            }
        }
        let completed: f64 = sums.iter().sum();
        // Mass conservation: completed chunks plus the open tail partition
        // the causal prefix.
        debug_assert!((total - 1.0).abs() < 1e-4, "attention row sums to {total}");
        let inv = 1.0 / completed.max(1e-30);
        let out = &mut probs.data_mut()[i * c..i * c + vis];
        for (o, s) in out.iter_mut().zip(&sums) {
            *o = (s * inv) as f32;
        }
    }
    Ok(ChunkAttention { probs, valid })
}

/// Mean KL(teacher || student) over valid rows, averaged across layers.
pub fn distill_loss(teacher: &[ChunkAttention], student: &[ChunkAttention]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::Input(format!(
            "distill_loss: {} teacher layers vs {} student layers",
            teacher.len(),
            student.len()
        )));
    }
    let mut per_layer = Vec::with_capacity(teacher.len());
    for (t, s) in teacher.iter().zip(student) {
        if t.valid != s.valid {
            return Err(Error::Input("distill_loss: validity masks differ".into()));
        }
        if !t.valid.iter().any(|&v| v) {
            continue;
        }
        per_layer.push(crate::numerics::kl_div_rows(&t.probs, &s.probs, &t.valid)?);
    }
    if per_layer.is_empty() {
        return Err(Error::Domain { op: "distill_loss", detail: "no valid rows in any layer".into() });
    }
    Ok(per_layer.iter().sum::<f64>() / per_layer.len() as f64)
}

/// Teacher distributions for every layer of a trace.
pub fn teacher_layers(
    trace_attn: &[&Tensor],
    cmap: &ChunkMap,
) -> Result<Vec<ChunkAttention>> {
    trace_attn.iter().map(|a| aggregate_teacher(a, cmap)).collect()
}

/// Student distributions for every layer of a trace under the given adapters.
pub fn student_layers(
    trace_q: &[&Tensor],
    trace_k: &[&Tensor],
    cmap: &ChunkMap,
    params: &QkAdapterParams,
) -> Result<Vec<ChunkAttention>> {
    trace_q
        .iter()
        .zip(trace_k)
        .zip(&params.layers)
        .map(|((q, k), p)| {
            let (qbar, kbar) = compress_inputs(q, k, cmap, p)?;
            student_attention(&qbar, &kbar, cmap)
        })
        .collect()
}

/// Adam on the layer-averaged distillation loss. The teacher is a constant
/// (no gradient flows through the aggregation) and the backbone is read-only.
/// Chunk maps come from the corpus rule labels, not the learned chunker.
///
/// Returns trained adapters plus the loss curve.
pub fn train_adapters(
    backbone: &BackboneWeights,
    docs: &[LabeledDoc],
    cfg: &TrainConfig,
    batch: usize,
    seqlen: usize,
    d_a: usize,
    seed: u64,
) -> Result<(QkAdapterParams, Vec<(usize, f64)>)> {
    let batches = make_batches(docs, seqlen, batch);
    if batches.is_empty() {
        return Err(Error::Input("train_adapters: corpus too small for one batch".into()));
    }
    let n_layers = backbone.config.n_layers;
    let mut params = QkAdapterParams::init(&backbone.config, d_a, seed);
    let sizes: Vec<usize> = params
        .layers
        .iter()
        .flat_map(|l| [l.wq.numel(), l.bq.numel(), l.wk.numel(), l.bk.numel()])
        .collect();
    let mut adam = AdamState::new(AdamParams { lr: cfg.lr, ..AdamParams::default() }, &sizes);
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let b = &batches[step % batches.len()];
        let results: Vec<Result<Option<(f64, Vec<Tensor>)>>> = b
            .inputs
            .par_iter()
            .zip(b.labels.par_iter())
            .map(|(inp, labels)| item_loss_and_grads(backbone, &params, inp, labels))
            .collect();
        let mut grads_acc: Option<Vec<Tensor>> = None;
        let mut loss_acc = 0.0;
        let mut used = 0usize;
        for r in results {
            if let Some((loss, grads)) = r? {
                loss_acc += loss;
                used += 1;
                match &mut grads_acc {
                    None => grads_acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
        }
        if used == 0 {
            return Err(Error::Domain {
                op: "train_adapters",
                detail: format!("step {step}: no window produced at least two chunks"),
            });
        }
        let mut grads = grads_acc.expect("used > 0");
        let inv = 1.0 / used as f32;
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        let mut param_refs: Vec<&mut Tensor> = Vec::with_capacity(4 * n_layers);
        for l in &mut params.layers {
            param_refs.extend([&mut l.wq, &mut l.bq, &mut l.wk, &mut l.bk]);
        }
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        adam_step(&mut param_refs, &grad_refs, &mut adam, cfg.lr_scale(step))?;
        curve.push((step, loss_acc / used as f64));
    }
    Ok((params, curve))
}

/// Distillation loss and parameter gradients for one window. Returns `None`
/// when the window has fewer than two completed chunks.
fn item_loss_and_grads(
    backbone: &BackboneWeights,
    params: &QkAdapterParams,
    tokens: &[u8],
    labels: &[u8],
) -> Result<Option<(f64, Vec<Tensor>)>> {
    let cmap = build_chunk_map(labels);
    if cmap.chunk_count() < 2 {
        return Ok(None);
    }
    let trace = forward_trace(backbone, tokens, true)?;
    let (g, loss, leaf_ids) = distill_graph(&trace_q(&trace), &trace_k(&trace), &trace_attn(&trace), &cmap, params)?;
    let mut g = g;
    g.backward(loss)?;
    let grads: Vec<Tensor> =
        leaf_ids.iter().map(|&id| g.grad(id).expect("trainable leaf has grad").clone()).collect();
    Ok(Some((g.value(loss).item() as f64, grads)))
}

fn trace_q(trace: &crate::backbone::ForwardTrace) -> Vec<&Tensor> {
    trace.layers.iter().map(|l| &l.q).collect()
}
fn trace_k(trace: &crate::backbone::ForwardTrace) -> Vec<&Tensor> {
    trace.layers.iter().map(|l| &l.k).collect()
}
fn trace_attn(trace: &crate::backbone::ForwardTrace) -> Vec<&Tensor> {
    trace.layers.iter().map(|l| &l.attn).collect()
}

/// Build the per-window distillation graph: per layer, an affine adapter
/// pair, masked softmax over visible chunks, and KL against the constant
/// teacher; layer losses averaged. Rows with fewer than two visible chunks
/// are excluded (they form a contiguous prefix, so a row slice suffices).
///
/// Returns the graph, the loss node, and the adapter leaves in canonical
/// order (wq, bq, wk, bk per layer).
pub fn distill_graph(
    trace_q: &[&Tensor],
    trace_k: &[&Tensor],
    trace_attn: &[&Tensor],
    cmap: &ChunkMap,
    params: &QkAdapterParams,
) -> Result<(Graph<f32>, crate::numerics::NodeId, Vec<crate::numerics::NodeId>)> {
    build_distill_graph::<f32>(trace_q, trace_k, trace_attn, cmap, params)
}

/// 64-bit variant for finite-difference checks.
pub fn distill_graph_f64(
    trace_q: &[&Tensor],
    trace_k: &[&Tensor],
    trace_attn: &[&Tensor],
    cmap: &ChunkMap,
    params: &QkAdapterParams,
) -> Result<(Graph<f64>, crate::numerics::NodeId, Vec<crate::numerics::NodeId>)> {
    build_distill_graph::<f64>(trace_q, trace_k, trace_attn, cmap, params)
}

fn build_distill_graph<E: crate::numerics::Elem>(
    trace_q: &[&Tensor],
    trace_k: &[&Tensor],
    trace_attn: &[&Tensor],
    cmap: &ChunkMap,
    params: &QkAdapterParams,
) -> Result<(Graph<E>, crate::numerics::NodeId, Vec<crate::numerics::NodeId>)> {
    let c = cmap.chunk_count();
    if c < 2 {
        return Err(Error::Domain {
            op: "distill_graph",
            detail: "need at least two completed chunks".into(),
        });
    }
    let n = cmap.n_tokens;
    let v0 = cmap.boundaries[1]; // first row with >= 2 visible chunks
    let n_valid = n - v0;
    let d_a = params.d_adapter();
    let scale = 1.0 / (d_a as f64).sqrt();

    // Visibility keep-mask over the valid-row slice.
    let mut keep = vec![false; n_valid * c];
    for r in 0..n_valid {
        let vis = ChunkAttention::visible(cmap, v0 + r);
        for j in 0..vis {
            keep[r * c + j] = true;
        }
    }
    let keep = Arc::new(keep);
    let row_mask = Arc::new(vec![true; n_valid]);

    let mut g = Graph::<E>::new();
    let mut leaf_ids = Vec::with_capacity(4 * params.layers.len());
    let mut layer_losses = Vec::with_capacity(params.layers.len());
    for (li, layer) in params.layers.iter().enumerate() {
        let q_cat = concat_heads(trace_q[li]);
        let k_cat = concat_heads(trace_k[li]);
        // Valid-row slice of the queries; boundary rows of the keys.
        let d = q_cat.cols();
        let mut q_valid = Tensor::<f32>::zeros(vec![n_valid, d]);
        q_valid
            .data_mut()
            .copy_from_slice(&q_cat.data()[v0 * d..n * d]);
        let mut k_bound = Tensor::<f32>::zeros(vec![c, d]);
        for (j, &bpos) in cmap.boundaries.iter().enumerate() {
            k_bound.data_mut()[j * d..(j + 1) * d].copy_from_slice(k_cat.row(bpos));
        }

        let teacher = aggregate_teacher(trace_attn[li], cmap)?;
        let mut t_valid = Tensor::<f32>::zeros(vec![n_valid, c]);
        t_valid.data_mut().copy_from_slice(&teacher.probs.data()[v0 * c..n * c]);

        let wq = g.leaf(layer.wq.cast::<E>(), &format!("qk_adapter.L{}.wq", li + 1));
        let bq = g.leaf(layer.bq.cast::<E>(), &format!("qk_adapter.L{}.bq", li + 1));
        let wk = g.leaf(layer.wk.cast::<E>(), &format!("qk_adapter.L{}.wk", li + 1));
        let bk = g.leaf(layer.bk.cast::<E>(), &format!("qk_adapter.L{}.bk", li + 1));
        leaf_ids.extend([wq, bq, wk, bk]);

        let qc = g.constant(q_valid.cast::<E>());
        let kc = g.constant(k_bound.cast::<E>());
        let tc = g.constant(t_valid.cast::<E>());

        let qb = g.matmul(qc, wq)?;
        let qb = g.add_bias_row(qb, bq)?;
        let kb = g.matmul(kc, wk)?;
        let kb = g.add_bias_row(kb, bk)?;
        let logits = g.matmul_ex(qb, false, kb, true)?;
        let scaled = g.scale(logits, scale)?;
        let student = g.softmax_rows(scaled, GraphMask::Keep(keep.clone()))?;
        layer_losses.push(g.kl_div_rows(tc, student, row_mask.clone())?);
    }
    let loss = g.mean_scalars(&layer_losses)?;
    Ok((g, loss, leaf_ids))
}

/// Per-layer and voted top-k recall of the student selection against the
/// teacher's, at the given rows. `k` is clipped per row to the visible-chunk
/// count. Voting follows the decode engine's global-top-k rule.
pub fn chunk_recall(
    student: &[ChunkAttention],
    teacher: &[ChunkAttention],
    cmap: &ChunkMap,
    k: usize,
    rows: &[usize],
) -> Result<(Vec<f64>, f64)> {
    if k == 0 {
        return Err(Error::Input("chunk_recall: k must be >= 1".into()));
    }
    let n_layers = student.len();
    let mut per_layer = vec![0.0f64; n_layers];
    let mut voted = 0.0f64;
    let mut used_rows = 0usize;
    for &i in rows {
        if !student.iter().all(|s| s.valid[i]) || !teacher.iter().all(|t| t.valid[i]) {
            continue;
        }
        used_rows += 1;
        let vis = ChunkAttention::visible(cmap, i);
        let k_eff = k.min(vis);
        let s_row = |l: usize, s: &[ChunkAttention]| -> Vec<f64> {
            s[l].probs.row(i)[..vis].iter().map(|&p| p as f64).collect()
        };
        let mut s_sets = Vec::with_capacity(n_layers);
        let mut t_sets = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let s_scores = s_row(l, student);
            let t_scores = s_row(l, teacher);
            let s_top = topk_indices(&s_scores, k_eff);
            let t_top = topk_indices(&t_scores, k_eff);
            per_layer[l] +=
                s_top.iter().filter(|x| t_top.contains(x)).count() as f64 / k_eff as f64;
            s_sets.push(s_top);
            t_sets.push(t_top);
        }
        let s_scores_all: Vec<Vec<f64>> = (0..n_layers).map(|l| s_row(l, student)).collect();
        let t_scores_all: Vec<Vec<f64>> = (0..n_layers).map(|l| s_row(l, teacher)).collect();
        let s_global = vote_global_topk(&s_sets, &s_scores_all, k_eff);
        let t_global = vote_global_topk(&t_sets, &t_scores_all, k_eff);
        voted += s_global.iter().filter(|x| t_global.contains(x)).count() as f64 / k_eff as f64;
    }
    if used_rows == 0 {
        return Err(Error::Domain { op: "chunk_recall", detail: "no valid rows".into() });
    }
    for v in per_layer.iter_mut() {
        *v /= used_rows as f64;
    }
    Ok((per_layer, voted / used_rows as f64))
}

/// One row of the recall report.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallRow {
    pub layer: usize,
    pub k: usize,
    pub recall: f64,
}

/// Evaluate per-layer recall (and voted recall per k) at the final valid row
/// of each document — the position chunk selection runs from at decode time.
/// Returns `n_layers × |ks|` rows plus the voted recall for each k.
pub fn recall_report(
    backbone: &BackboneWeights,
    params: &QkAdapterParams,
    docs: &[LabeledDoc],
    ks: &[usize],
) -> Result<(Vec<RecallRow>, Vec<(usize, f64)>)> {
    let n_layers = backbone.config.n_layers;
    struct DocEval {
        per_layer: Vec<Vec<f64>>, // [k][layer]
        voted: Vec<f64>,          // [k]
    }
    let evals: Vec<Result<Option<DocEval>>> = docs
        .par_iter()
        .map(|doc| {
            let cmap = build_chunk_map(&doc.labels);
            if cmap.chunk_count() < 2 {
                return Ok(None);
            }
            let trace = forward_trace(backbone, doc.tokens(), true)?;
            let teacher = teacher_layers(&trace_attn(&trace), &cmap)?;
            let student = student_layers(&trace_q(&trace), &trace_k(&trace), &cmap, params)?;
            let last = cmap.n_tokens - 1;
            let mut per_layer = Vec::with_capacity(ks.len());
            let mut voted = Vec::with_capacity(ks.len());
            for &k in ks {
                let (pl, v) = chunk_recall(&student, &teacher, &cmap, k, &[last])?;
                per_layer.push(pl);
                voted.push(v);
            }
            Ok(Some(DocEval { per_layer, voted }))
        })
        .collect();

    let mut counted = 0usize;
    let mut layer_sums = vec![vec![0.0f64; n_layers]; ks.len()];
    let mut voted_sums = vec![0.0f64; ks.len()];
    for e in evals {
        if let Some(ev) = e? {
            counted += 1;
            for (ki, pl) in ev.per_layer.iter().enumerate() {
                for (l, v) in pl.iter().enumerate() {
                    layer_sums[ki][l] += v;
                }
            }
            for (ki, v) in ev.voted.iter().enumerate() {
                voted_sums[ki] += v;
            }
        }
    }
    if counted == 0 {
        return Err(Error::Domain { op: "recall_report", detail: "no usable documents".into() });
    }
    let mut rows = Vec::with_capacity(n_layers * ks.len());
    for l in 0..n_layers {
        for (ki, &k) in ks.iter().enumerate() {
            rows.push(RecallRow { layer: l, k, recall: layer_sums[ki][l] / counted as f64 });
        }
    }
    let voted = ks
        .iter()
        .zip(&voted_sums)
        .map(|(&k, &s)| (k, s / counted as f64))
        .collect();
    Ok((rows, voted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{forward_full, init_weights};
    use crate::corpus::gen_sentences;
    use crate::numerics::finite_diff_check;

    fn tiny_backbone(seed: u64) -> BackboneWeights {
        init_weights(&ModelConfig::tiny(seed)).unwrap()
    }

    #[test]
    fn compress_shapes() {
        let w = tiny_backbone(3);
        let tokens: Vec<u8> = (0..100u8).collect();
        let trace = forward_full(&w, &tokens).unwrap();
        let mut labels = vec![0u8; 100];
        for b in [9, 23, 41, 58, 66, 77, 91] {
            labels[b] = 1;
        }
        let cmap = build_chunk_map(&labels);
        let params = QkAdapterParams::init(&w.config, 32, 5);
        let (qbar, kbar) =
            compress_inputs(&trace.layers[0].q, &trace.layers[0].k, &cmap, &params.layers[0])
                .unwrap();
        assert_eq!(qbar.shape(), &[100, 32]);
        assert_eq!(kbar.shape(), &[7, 32]);
    }

    #[test]
    fn zero_chunks_degenerate() {
        let w = tiny_backbone(3);
        let tokens: Vec<u8> = (0..24u8).collect();
        let trace = forward_full(&w, &tokens).unwrap();
        let cmap = build_chunk_map(&vec![0u8; 24]);
        let params = QkAdapterParams::init(&w.config, 16, 5);
        let (_, kbar) =
            compress_inputs(&trace.layers[0].q, &trace.layers[0].k, &cmap, &params.layers[0])
                .unwrap();
        assert_eq!(kbar.rows(), 0);
        let qbar = Tensor::zeros(vec![24, 16]);
        let s = student_attention(&qbar, &kbar, &cmap).unwrap();
        assert!(s.valid.iter().all(|&v| !v), "no row can be valid without chunks");
    }

    #[test]
    fn identity_adapter_passes_queries_through() {
        let w = tiny_backbone(7);
        let tokens: Vec<u8> = (40..90u8).collect();
        let trace = forward_full(&w, &tokens).unwrap();
        let d = w.config.d_model;
        let mut eye = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        let layer = QkLayerParams {
            wq: eye.clone(),
            bq: Tensor::zeros(vec![d]),
            wk: eye,
            bk: Tensor::zeros(vec![d]),
        };
        let mut labels = vec![0u8; 50];
        labels[10] = 1;
        labels[30] = 1;
        let cmap = build_chunk_map(&labels);
        let (qbar, _) = compress_inputs(&trace.layers[1].q, &trace.layers[1].k, &cmap, &layer)
            .unwrap();
        let q_cat = concat_heads(&trace.layers[1].q);
        assert_eq!(qbar, q_cat);
    }

    #[test]
    fn student_single_visible_chunk_is_invalid() {
        let mut labels = vec![0u8; 10];
        labels[3] = 1;
        labels[8] = 1;
        let cmap = build_chunk_map(&labels);
        let qbar = Tensor::new(vec![10, 4], vec![0.1; 40]).unwrap();
        let kbar = Tensor::new(vec![2, 4], vec![0.2; 8]).unwrap();
        let s = student_attention(&qbar, &kbar, &cmap).unwrap();
        // Rows 0..=2 see nothing, 3..=7 see one chunk, 8..=9 see two.
        for i in 0..8 {
            assert!(!s.valid[i], "row {i}");
        }
        for i in 8..10 {
            assert!(s.valid[i], "row {i}");
        }
    }

    #[test]
    fn student_equal_logits_uniform() {
        let mut labels = vec![0u8; 8];
        for b in [1, 3, 5, 7] {
            labels[b] = 1;
        }
        let cmap = build_chunk_map(&labels);
        // Zero adapters give all-equal logits.
        let qbar = Tensor::zeros(vec![8, 4]);
        let kbar = Tensor::zeros(vec![4, 4]);
        let s = student_attention(&qbar, &kbar, &cmap).unwrap();
        assert!(s.valid[7]);
        for j in 0..4 {
            assert!((s.probs.at2(7, j) - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn student_top1_is_argmax_of_logits() {
        let mut labels = vec![0u8; 12];
        for b in [2, 5, 8, 11] {
            labels[b] = 1;
        }
        let cmap = build_chunk_map(&labels);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let qbar = Tensor::new(vec![12, 6], (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let kbar =
            Tensor::new(vec![4, 6], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let s = student_attention(&qbar, &kbar, &cmap).unwrap();
        let logits = matmul_ex(&qbar, false, &kbar, true).unwrap();
        for i in 0..12 {
            if !s.valid[i] {
                continue;
            }
            let vis = ChunkAttention::visible(&cmap, i);
            let argmax_probs = (0..vis)
                .max_by(|&a, &b| s.probs.at2(i, a).partial_cmp(&s.probs.at2(i, b)).unwrap())
                .unwrap();
            let argmax_logits = (0..vis)
                .max_by(|&a, &b| logits.at2(i, a).partial_cmp(&logits.at2(i, b)).unwrap())
                .unwrap();
            assert_eq!(argmax_probs, argmax_logits, "row {i}");
        }
    }

    #[test]
    fn teacher_mass_and_brute_force_oracle() {
        // Random 2-head 12-token attention with boundaries {3, 7, 11},
        // checked against a scalar aggregation loop.
        let h = 2;
        let n = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut attn = Tensor::zeros(vec![h, n, n]);
        for head in 0..h {
            for i in 0..n {
                let mut row: Vec<f64> = (0..=i).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = row.iter().sum();
                for v in row.iter_mut() {
                    *v /= s;
                }
                for (j, &v) in row.iter().enumerate() {
                    attn.data_mut()[(head * n + i) * n + j] = v as f32;
                }
            }
        }
        let mut labels = vec![0u8; n];
        for b in [3, 7, 11] {
            labels[b] = 1;
        }
        let cmap = build_chunk_map(&labels);
        let t = aggregate_teacher(&attn, &cmap).unwrap();

        // Scalar brute-force oracle.
        for i in 0..n {
            let vis = ChunkAttention::visible(&cmap, i);
            if vis < 2 {
                assert!(!t.valid[i]);
                continue;
            }
            let avg =
                |i: usize, j: usize| -> f64 {
                    (0..h)
                        .map(|head| attn.data()[(head * n + i) * n + j] as f64)
                        .sum::<f64>()
                        / h as f64
                };
            let spans = [(0usize, 3usize), (4, 7), (8, 11)];
            let mut sums = vec![0.0; vis];
            for (j, s) in sums.iter_mut().enumerate() {
                for tpos in spans[j].0..=spans[j].1.min(i) {
                    *s += avg(i, tpos);
                }
            }
            let total: f64 = sums.iter().sum();
            for (j, s) in sums.iter().enumerate() {
                assert!(
                    (t.probs.at2(i, j) as f64 - s / total).abs() < 1e-6,
                    "row {i} chunk {j}"
                );
            }
            // Pre-renormalization mass: completed + tail == 1.
            let tail: f64 = ((cmap.boundaries[vis - 1] + 1)..=i).map(|tp| avg(i, tp)).sum();
            assert!((total + tail - 1.0).abs() < 1e-5, "row {i} mass {}", total + tail);
        }
    }

    #[test]
    fn teacher_boundary_row_mass_complete() {
        // At a boundary row with no tail, chunk sums partition the prefix.
        let h = 1;
        let n = 8;
        let mut attn = Tensor::zeros(vec![h, n, n]);
        for i in 0..n {
            for j in 0..=i {
                attn.data_mut()[i * n + j] = 1.0 / (i + 1) as f32;
            }
        }
        let mut labels = vec![0u8; n];
        labels[3] = 1;
        labels[7] = 1;
        let cmap = build_chunk_map(&labels);
        let t = aggregate_teacher(&attn, &cmap).unwrap();
        assert!(t.valid[7]);
        let sum: f64 = (0..2).map(|j| t.probs.at2(7, j) as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn teacher_single_chunk_invalid() {
        let n = 6;
        let mut attn = Tensor::zeros(vec![1, n, n]);
        for i in 0..n {
            attn.data_mut()[i * n] = 1.0;
        }
        let mut labels = vec![0u8; n];
        labels[5] = 1;
        let cmap = build_chunk_map(&labels);
        let t = aggregate_teacher(&attn, &cmap).unwrap();
        assert!(t.valid.iter().all(|&v| !v));
    }

    #[test]
    fn distill_identical_is_zero_and_hand_case() {
        let probs = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.7, 0.3]).unwrap();
        let a = ChunkAttention { probs: probs.clone(), valid: vec![false, true] };
        let b = ChunkAttention { probs, valid: vec![false, true] };
        let loss = distill_loss(&[a.clone()], &[b]).unwrap();
        assert!(loss.abs() < 1e-7);

        // One layer, one valid row, teacher [1,0] student [0.5,0.5] -> ln 2.
        let t = ChunkAttention {
            probs: Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            valid: vec![true],
        };
        let s = ChunkAttention {
            probs: Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap(),
            valid: vec![true],
        };
        let loss = distill_loss(&[t], &[s]).unwrap();
        assert!((loss - (2.0f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn distill_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let c = rng.gen_range(2..6usize);
            let rows = rng.gen_range(1..5usize);
            let mk = |rng: &mut ChaCha8Rng| -> Tensor {
                let mut data = Vec::new();
                for _ in 0..rows {
                    let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    data.extend(raw.iter().map(|v| (v / s) as f32));
                }
                Tensor::new(vec![rows, c], data).unwrap()
            };
            let t = ChunkAttention { probs: mk(&mut rng), valid: vec![true; rows] };
            let s = ChunkAttention { probs: mk(&mut rng), valid: vec![true; rows] };
            assert!(distill_loss(&[t], &[s]).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn distill_no_valid_rows_is_domain_error() {
        let t = ChunkAttention { probs: Tensor::zeros(vec![2, 2]), valid: vec![false, false] };
        let s = t.clone();
        assert!(matches!(distill_loss(&[t], &[s]), Err(Error::Domain { .. })));
    }

    #[test]
    fn distill_invariant_under_chunk_relabeling() {
        // Permuting chunk columns consistently in teacher and student leaves
        // the loss unchanged.
        let t = Tensor::new(vec![1, 3], vec![0.6, 0.3, 0.1]).unwrap();
        let s = Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.3]).unwrap();
        let perm = [2usize, 0, 1];
        let permute = |x: &Tensor| -> Tensor {
            let mut out = Tensor::zeros(vec![1, 3]);
            for (to, &from) in perm.iter().enumerate() {
                out.data_mut()[to] = x.data()[from];
            }
            out
        };
        let base = distill_loss(
            &[ChunkAttention { probs: t.clone(), valid: vec![true] }],
            &[ChunkAttention { probs: s.clone(), valid: vec![true] }],
        )
        .unwrap();
        let permuted = distill_loss(
            &[ChunkAttention { probs: permute(&t), valid: vec![true] }],
            &[ChunkAttention { probs: permute(&s), valid: vec![true] }],
        )
        .unwrap();
        assert!((base - permuted).abs() < 1e-9);
    }

    #[test]
    fn adapter_training_overfits_one_batch_and_freezes_backbone() {
        let backbone = tiny_backbone(19);
        let before = backbone.clone();
        // One small batch, cycled: loss must at least halve in 200 steps.
        let docs = gen_sentences(55, 2, (460, 520));
        let cfg = TrainConfig { steps: 200, lr: 3e-3, ..Default::default() };
        let (_, curve) = train_adapters(&backbone, &docs, &cfg, 1, 256, 16, 3).unwrap();
        assert_eq!(backbone, before, "backbone must stay frozen");
        let initial = curve.first().unwrap().1;
        let final_ = curve.last().unwrap().1;
        assert!(final_ < 0.5 * initial, "distill loss {initial} -> {final_}");
    }

    #[test]
    fn distill_gradients_match_finite_differences() {
        let backbone = tiny_backbone(23);
        let doc = &gen_sentences(91, 1, (200, 240))[0];
        let cmap = build_chunk_map(&doc.labels);
        assert!(cmap.chunk_count() >= 2);
        let trace = forward_full(&backbone, doc.tokens()).unwrap();
        let params = QkAdapterParams::init(&backbone.config, 8, 7);
        let q: Vec<&Tensor> = trace.layers.iter().map(|l| &l.q).collect();
        let k: Vec<&Tensor> = trace.layers.iter().map(|l| &l.k).collect();
        let a: Vec<&Tensor> = trace.layers.iter().map(|l| &l.attn).collect();
        let (mut g, loss, _) = distill_graph_f64(&q, &k, &a, &cmap, &params).unwrap();
        let err = finite_diff_check(&mut g, loss, 300, 1e-5, 13).unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn recall_identical_scores_and_k_clipping() {
        let mut labels = vec![0u8; 20];
        for b in [2, 5, 9, 13, 17] {
            labels[b] = 1;
        }
        let cmap = build_chunk_map(&labels);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = || {
            let mut probs = Tensor::zeros(vec![20, 5]);
            let mut valid = vec![false; 20];
            for i in 0..20 {
                let vis = ChunkAttention::visible(&cmap, i);
                if vis < 2 {
                    continue;
                }
                valid[i] = true;
                for j in 0..vis {
                    probs.data_mut()[i * 5 + j] = 1.0 / vis as f32;
                }
            }
            ChunkAttention { probs, valid }
        };
        let _ = &mut rng;
        let s = vec![mk(), mk()];
        let t = vec![mk(), mk()];
        let (per_layer, voted) = chunk_recall(&s, &t, &cmap, 2, &[19]).unwrap();
        for r in per_layer {
            assert!((r - 1.0).abs() < 1e-12);
        }
        assert!((voted - 1.0).abs() < 1e-12);
        // k >= c clips to full intersection = 1.0 regardless of scores.
        let (pl, v) = chunk_recall(&s, &t, &cmap, 50, &[19]).unwrap();
        for r in pl {
            assert!((r - 1.0).abs() < 1e-12);
        }
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recall_matches_brute_force_sets() {
        let mut labels = vec![0u8; 30];
        for b in [4, 9, 14, 19, 24, 29] {
            labels[b] = 1;
        }
        let cmap = build_chunk_map(&labels);
        let c = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mk = |rng: &mut ChaCha8Rng| {
            let mut probs = Tensor::zeros(vec![30, c]);
            let mut valid = vec![false; 30];
            for i in 0..30 {
                let vis = ChunkAttention::visible(&cmap, i);
                if vis < 2 {
                    continue;
                }
                valid[i] = true;
                let raw: Vec<f64> = (0..vis).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                for j in 0..vis {
                    probs.data_mut()[i * c + j] = (raw[j] / s) as f32;
                }
            }
            ChunkAttention { probs, valid }
        };
        let s = vec![mk(&mut rng)];
        let t = vec![mk(&mut rng)];
        let k = 2;
        let (per_layer, _) = chunk_recall(&s, &t, &cmap, k, &[29]).unwrap();
        // Brute force: enumerate top-2 by score.
        let top2 = |ca: &ChunkAttention| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..c).collect();
            idx.sort_by(|&a, &b| {
                ca.probs.at2(29, b).partial_cmp(&ca.probs.at2(29, a)).unwrap().then(a.cmp(&b))
            });
            idx.truncate(k);
            idx
        };
        let expect = top2(&s[0]).iter().filter(|x| top2(&t[0]).contains(x)).count() as f64
            / k as f64;
        assert!((per_layer[0] - expect).abs() < 1e-12);
    }

    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;
}
