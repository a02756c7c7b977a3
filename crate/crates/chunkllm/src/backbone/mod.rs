//! Toy decoder-only transformer: pre-norm RMSNorm blocks, full-dimension
//! RoPE on Q/K, GELU MLP, no biases, weight-tied output head.
//!
//! The model is deliberately small; what matters is that a forward pass
//! exposes per-layer post-RoPE Q/K/V, head-level attention, and the
//! bottommost block's hidden states — everything the adapters train against.

mod checkpoint;
mod train;

pub use checkpoint::{
    checkpoint_size, load_checkpoint, named_to_weights, save_checkpoint, weights_to_named,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use train::{lm_loss_graph, pretrain, GraphParams, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{matmul_ex, rmsnorm, rope_apply, softmax_rows, Elem, SoftmaxMask, Tensor};
use crate::{Error, Result};

/// Architecture and initialization parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub max_context: usize,
    pub rope_base: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_head: 32,
            max_context: 32768,
            rope_base: 10000.0,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Small config for fast tests: 2 layers, d_model 32.
    pub fn tiny(seed: u64) -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_head: 16,
            max_context: 2048,
            rope_base: 10000.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Config(format!("d_head {} must be even", self.d_head)));
        }
        if self.max_context == 0 {
            return Err(Error::Config("max_context must be >= 1".into()));
        }
        if self.vocab_size == 0 || self.vocab_size > 256 {
            return Err(Error::Config(format!(
                "vocab_size {} outside byte-level range",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Total trainable parameter count (embedding tied to the output head).
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * (4 * d) + 2 * d;
        self.vocab_size * d + self.n_layers * per_layer + d
    }
}

/// One transformer block's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
    pub norm1: Tensor,
    pub norm2: Tensor,
}

/// Full backbone parameters. Frozen during adapter training: adapter code
/// takes these by shared reference only.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        // Box-Muller over the seeded stream.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push((r * theta.cos() * std) as f32);
        if data.len() < n {
            data.push((r * theta.sin() * std) as f32);
        }
    }
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Deterministic initialization: normal(0, 0.02), with the output-adjacent
/// projections (attention output, MLP down) scaled by 1/sqrt(2 * n_layers).
pub fn init_weights(config: &ModelConfig) -> Result<BackboneWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let std = 0.02;
    let out_std = std / (2.0 * config.n_layers as f64).sqrt();
    let embed = normal_tensor(&mut rng, vec![config.vocab_size, d], std);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            wq: normal_tensor(&mut rng, vec![d, d], std),
            wk: normal_tensor(&mut rng, vec![d, d], std),
            wv: normal_tensor(&mut rng, vec![d, d], std),
            wo: normal_tensor(&mut rng, vec![d, d], out_std),
            w_up: normal_tensor(&mut rng, vec![d, 4 * d], std),
            w_down: normal_tensor(&mut rng, vec![4 * d, d], out_std),
            norm1: Tensor::new(vec![d], vec![1.0; d])?,
            norm2: Tensor::new(vec![d], vec![1.0; d])?,
        });
    }
    Ok(BackboneWeights {
        config: config.clone(),
        embed,
        layers,
        final_norm: Tensor::new(vec![d], vec![1.0; d])?,
    })
}

/// Post-RoPE Q/K/V, head-level attention, layer-1 hidden states, and logits
/// captured from a full-attention forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Per layer: `[heads, n, d_head]` post-RoPE tensors and `[heads, n, n]`
    /// attention (empty when attention capture is off).
    pub layers: Vec<LayerTrace>,
    /// Output of the bottommost transformer block, `[n, d_model]`.
    pub h_l1: Tensor,
    /// `[n, vocab]`.
    pub logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub attn: Tensor,
}

/// Heads re-concatenated per token: `[n, heads * d_head]` view of a
/// `[heads, n, d_head]` tensor.
pub fn concat_heads(t: &Tensor) -> Tensor {
    let (h, n, dh) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Tensor::zeros(vec![n, h * dh]);
    for head in 0..h {
        for row in 0..n {
            let src = &t.data()[(head * n + row) * dh..(head * n + row + 1) * dh];
            out.data_mut()[row * h * dh + head * dh..row * h * dh + (head + 1) * dh]
                .copy_from_slice(src);
        }
    }
    out
}

/// Project `x` `[n, d]` through `w` into `[heads, n, d_head]`, applying RoPE
/// when `positions` is given.
fn project_heads(
    x: &Tensor,
    w: &Tensor,
    n_heads: usize,
    d_head: usize,
    positions: Option<(&[usize], f64)>,
) -> Result<Tensor> {
    let p = matmul_ex(x, false, w, false)?; // [n, d]
    let n = p.rows();
    let mut out = Tensor::zeros(vec![n_heads, n, d_head]);
    for row in 0..n {
        for head in 0..n_heads {
            let src = &p.row(row)[head * d_head..(head + 1) * d_head];
            out.data_mut()[(head * n + row) * d_head..(head * n + row + 1) * d_head]
                .copy_from_slice(src);
        }
    }
    match positions {
        Some((pos, base)) => rope_apply(&out, pos, base),
        None => Ok(out),
    }
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u8]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("forward pass on empty token list".into()));
    }
    if tokens.len() > cfg.max_context {
        return Err(Error::Input(format!(
            "{} tokens exceed max_context {}",
            tokens.len(),
            cfg.max_context
        )));
    }
    Ok(())
}

fn embed_rows(w: &BackboneWeights, tokens: &[u8]) -> Tensor {
    let d = w.config.d_model;
    let mut x = Tensor::zeros(vec![tokens.len(), d]);
    for (row, &t) in tokens.iter().enumerate() {
        x.data_mut()[row * d..(row + 1) * d].copy_from_slice(w.embed.row(t as usize));
    }
    x
}

/// Run one block in place over `x`; returns the per-layer trace pieces when
/// `keep_attn` is set.
fn run_block(
    w: &BackboneWeights,
    layer: &LayerWeights,
    x: &mut Tensor,
    positions: &[usize],
    keep_attn: bool,
) -> Result<LayerTrace> {
    let cfg = &w.config;
    let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);
    let n = x.rows();
    let scale = (1.0 / (dh as f64).sqrt()) as f32;

    let xn = rmsnorm(x, &layer.norm1)?;
    let q = project_heads(&xn, &layer.wq, heads, dh, Some((positions, cfg.rope_base)))?;
    let k = project_heads(&xn, &layer.wk, heads, dh, Some((positions, cfg.rope_base)))?;
    let v = project_heads(&xn, &layer.wv, heads, dh, None)?;

    let mut attn = Tensor::zeros(if keep_attn { vec![heads, n, n] } else { vec![0] });
    let mut ctx = Tensor::zeros(vec![n, d]);
    for head in 0..heads {
        let hslice = |t: &Tensor| {
            Tensor::new(vec![n, dh], t.data()[head * n * dh..(head + 1) * n * dh].to_vec())
                .expect("head slice is contiguous")
        };
        let (qh, kh, vh) = (hslice(&q), hslice(&k), hslice(&v));
        let mut scores = matmul_ex(&qh, false, &kh, true)?;
        for s in scores.data_mut() {
            *s *= scale;
        }
        let probs = softmax_rows(&scores, Some(SoftmaxMask::Causal))?;
        let ctx_h = matmul_ex(&probs, false, &vh, false)?;
        for row in 0..n {
            ctx.data_mut()[row * d + head * dh..row * d + (head + 1) * dh]
                .copy_from_slice(ctx_h.row(row));
        }
        if keep_attn {
            attn.data_mut()[head * n * n..(head + 1) * n * n].copy_from_slice(probs.data());
        }
    }
    let proj = matmul_ex(&ctx, false, &layer.wo, false)?;
    for (a, b) in x.data_mut().iter_mut().zip(proj.data()) {
        *a += *b;
    }

    let xn2 = rmsnorm(x, &layer.norm2)?;
    let mut up = matmul_ex(&xn2, false, &layer.w_up, false)?;
    for u in up.data_mut() {
        *u = crate::numerics::gelu_scalar(*u as f64) as f32;
    }
    let down = matmul_ex(&up, false, &layer.w_down, false)?;
    for (a, b) in x.data_mut().iter_mut().zip(down.data()) {
        *a += *b;
    }
    Ok(LayerTrace { q, k, v, attn })
}

/// Full-attention forward pass capturing the complete trace.
pub fn forward_full(w: &BackboneWeights, tokens: &[u8]) -> Result<ForwardTrace> {
    forward_trace(w, tokens, true)
}

/// Forward pass with optional attention capture (`keep_attn = false` drops
/// the `[heads, n, n]` matrices; Q/K/V and hidden states are always kept).
pub fn forward_trace(w: &BackboneWeights, tokens: &[u8], keep_attn: bool) -> Result<ForwardTrace> {
    check_tokens(&w.config, tokens)?;
    let n = tokens.len();
    let positions: Vec<usize> = (0..n).collect();
    let mut x = embed_rows(w, tokens);
    let mut layer_traces = Vec::with_capacity(w.config.n_layers);
    let mut h_l1 = Tensor::zeros(vec![0]);
    for (li, layer) in w.layers.iter().enumerate() {
        let lt = run_block(w, layer, &mut x, &positions, keep_attn)?;
        if li == 0 {
            h_l1 = x.clone();
        }
        layer_traces.push(lt);
    }
    let xf = rmsnorm(&x, &w.final_norm)?;
    let logits = matmul_ex(&xf, false, &w.embed, true)?;
    Ok(ForwardTrace { layers: layer_traces, h_l1, logits })
}

/// Output of the bottommost block only — all the chunk adapter needs.
pub fn layer1_hidden(w: &BackboneWeights, tokens: &[u8]) -> Result<Tensor> {
    check_tokens(&w.config, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut x = embed_rows(w, tokens);
    run_block(w, &w.layers[0], &mut x, &positions, false)?;
    Ok(x)
}

/// Decoding strategy for generation.
#[derive(Debug, Clone, Copy)]
pub enum Sampler {
    Greedy,
    Temperature { temp: f64, seed: u64 },
}

impl Sampler {
    pub fn sample(&self, logits: &[f32], rng: &mut Option<ChaCha8Rng>) -> u8 {
        match self {
            Sampler::Greedy => {
                let mut best = 0usize;
                for (i, &v) in logits.iter().enumerate() {
                    if v > logits[best] {
                        best = i;
                    }
                }
                best as u8
            }
            Sampler::Temperature { temp, .. } => {
                let rng = rng.as_mut().expect("temperature sampling needs a seeded rng");
                let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let weights: Vec<f64> =
                    logits.iter().map(|&l| ((l as f64 - max) / temp).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen_range(0.0..total);
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        return i as u8;
                    }
                    u -= w;
                }
                (logits.len() - 1) as u8
            }
        }
    }

    pub fn rng(&self) -> Option<ChaCha8Rng> {
        match self {
            Sampler::Greedy => None,
            Sampler::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        }
    }
}

/// Conventional uncompressed-KV incremental decoder — the baseline every
/// sparse policy is measured against.
pub struct VanillaDecoder<'a> {
    w: &'a BackboneWeights,
    /// Per layer: post-RoPE keys / values, one row per token, `[t][d_model]`
    /// with heads in column groups.
    k_cache: Vec<Vec<f32>>,
    v_cache: Vec<Vec<f32>>,
    len: usize,
    freqs: Vec<f64>,
}

impl<'a> VanillaDecoder<'a> {
    pub fn new(w: &'a BackboneWeights) -> Self {
        VanillaDecoder {
            w,
            k_cache: vec![Vec::new(); w.config.n_layers],
            v_cache: vec![Vec::new(); w.config.n_layers],
            len: 0,
            freqs: crate::numerics::rope_freqs(w.config.d_head, w.config.rope_base),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feed one token; returns the logits predicting the next token.
    pub fn step(&mut self, token: u8) -> Result<Vec<f32>> {
        let cfg = &self.w.config;
        if self.len >= cfg.max_context {
            return Err(Error::Input(format!("context overflow at {}", self.len)));
        }
        let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);
        let pos = self.len;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = self.w.embed.row(token as usize).to_vec();

        for (li, layer) in self.w.layers.iter().enumerate() {
            let xn = rmsnorm_vec(&x, layer.norm1.data());
            let mut q = matvec(&xn, &layer.wq);
            let mut k = matvec(&xn, &layer.wk);
            let v = matvec(&xn, &layer.wv);
            for h in 0..heads {
                crate::numerics::rope_rotate_row(
                    &mut q[h * dh..(h + 1) * dh],
                    pos,
                    &self.freqs,
                    false,
                );
                crate::numerics::rope_rotate_row(
                    &mut k[h * dh..(h + 1) * dh],
                    pos,
                    &self.freqs,
                    false,
                );
            }
            self.k_cache[li].extend_from_slice(&k);
            self.v_cache[li].extend_from_slice(&v);

            let t = pos + 1;
            let mut ctx = vec![0f32; d];
            for h in 0..heads {
                let qh = &q[h * dh..(h + 1) * dh];
                let mut logits = Vec::with_capacity(t);
                let mut max = f64::NEG_INFINITY;
                for row in 0..t {
                    let kr = &self.k_cache[li][row * d + h * dh..row * d + (h + 1) * dh];
                    let dot: f32 = qh.iter().zip(kr).map(|(a, b)| a * b).sum();
                    let s = dot as f64 * scale;
                    max = max.max(s);
                    logits.push(s);
                }
                let mut denom = 0.0f64;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    denom += *l;
                }
                let inv = 1.0 / denom;
                let out = &mut ctx[h * dh..(h + 1) * dh];
                for (row, l) in logits.iter().enumerate() {
                    let p = (l * inv) as f32;
                    let vr = &self.v_cache[li][row * d + h * dh..row * d + (h + 1) * dh];
                    for (o, vv) in out.iter_mut().zip(vr) {
                        *o += p * vv;
                    }
                }
            }
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
        }
        self.len += 1;

        let xf = rmsnorm_vec(&x, self.w.final_norm.data());
        let mut logits = vec![0f32; cfg.vocab_size];
        for (vcb, l) in logits.iter_mut().enumerate() {
            *l = xf.iter().zip(self.w.embed.row(vcb)).map(|(a, b)| a * b).sum();
        }
        Ok(logits)
    }
}

pub(crate) fn rmsnorm_vec(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let d = x.len();
    let ms = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
    let inv = 1.0 / (ms + crate::numerics::RMSNORM_EPS).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| (v as f64 * inv) as f32 * g).collect()
}

pub(crate) fn matvec(x: &[f32], w: &Tensor) -> Vec<f32> {
    // x[1×k] · w[k×n]
    let (k, n) = (w.rows(), w.cols());
    debug_assert_eq!(x.len(), k);
    let mut out = vec![0f32; n];
    unsafe {
        f32::gemm(
            1,
            k,
            n,
            1.0,
            x.as_ptr(),
            k as isize,
            1,
            w.data().as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// Full-attention incremental generation with a conventional KV cache.
pub fn generate_vanilla(
    w: &BackboneWeights,
    prompt: &[u8],
    n_new: usize,
    sampler: Sampler,
) -> Result<Vec<u8>> {
    if prompt.is_empty() {
        return Err(Error::Input("generate_vanilla: empty prompt".into()));
    }
    let mut dec = VanillaDecoder::new(w);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = dec.step(t)?;
    }
    let mut rng = sampler.rng();
    let mut out = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let next = sampler.sample(&logits, &mut rng);
        out.push(next);
        logits = dec.step(next)?;
    }
    Ok(out)
}
