//! Chunk Adapter: a one-layer classifier over the bottommost block's hidden
//! states that marks chunk-final tokens, its weighted-BCE training loop, and
//! token-level boundary metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{layer1_hidden, BackboneWeights, TrainConfig};
use crate::corpus::{boundary_pos_weight, make_batches, LabeledDoc};
use crate::numerics::{
    adam_step, sigmoid_scalar, AdamParams, AdamState, Graph, Tensor,
};
use crate::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.5;

/// One-layer boundary classifier: `sigmoid(H · weight + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkAdapterParams {
    /// `[d_model, 1]`
    pub weight: Tensor,
    /// `[1]`
    pub bias: Tensor,
}

impl ChunkAdapterParams {
    pub fn zeros(d_model: usize) -> Self {
        ChunkAdapterParams {
            weight: Tensor::zeros(vec![d_model, 1]),
            bias: Tensor::zeros(vec![1]),
        }
    }

    pub fn init(d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d_model as f64).sqrt();
        let data: Vec<f32> =
            (0..d_model).map(|_| (rng.gen_range(-std..std)) as f32).collect();
        ChunkAdapterParams {
            weight: Tensor::new(vec![d_model, 1], data).expect("shape matches"),
            bias: Tensor::zeros(vec![1]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.weight.rows()
    }

    pub fn to_named(&self, map: &mut std::collections::BTreeMap<String, Tensor>) {
        map.insert("chunk_adapter.weight".to_string(), self.weight.clone());
        map.insert("chunk_adapter.bias".to_string(), self.bias.clone());
    }

    pub fn from_named(map: &std::collections::BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor> {
            map.get(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))
        };
        Ok(ChunkAdapterParams { weight: get("chunk_adapter.weight")?, bias: get("chunk_adapter.bias")? })
    }

    /// Boundary probability for a single hidden-state row.
    pub fn prob(&self, h: &[f32]) -> f64 {
        debug_assert_eq!(h.len(), self.d_model());
        let z: f64 = h
            .iter()
            .zip(self.weight.data())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum::<f64>()
            + self.bias.data()[0] as f64;
        sigmoid_scalar(z)
    }
}

/// Monotone list of chunk-final token positions over a prefix of `n_tokens`.
/// Tokens after the last boundary form the open tail.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChunkMap {
    pub boundaries: Vec<usize>,
    pub n_tokens: usize,
}

impl ChunkMap {
    /// Completed-chunk count.
    pub fn chunk_count(&self) -> usize {
        self.boundaries.len()
    }

    /// Token span of completed chunk `j` (inclusive bounds).
    pub fn chunk_span(&self, j: usize) -> (usize, usize) {
        let start = if j == 0 { 0 } else { self.boundaries[j - 1] + 1 };
        (start, self.boundaries[j])
    }

    /// First token of the open tail (== n_tokens when the tail is empty).
    pub fn tail_start(&self) -> usize {
        self.boundaries.last().map(|&b| b + 1).unwrap_or(0)
    }

    pub fn tail_len(&self) -> usize {
        self.n_tokens - self.tail_start()
    }

    /// Append one token; marks it a boundary when `is_boundary` is set.
    pub fn push(&mut self, is_boundary: bool) {
        if is_boundary {
            self.boundaries.push(self.n_tokens);
        }
        self.n_tokens += 1;
    }

    /// Inverse of [`build_chunk_map`].
    pub fn to_labels(&self) -> Vec<u8> {
        let mut labels = vec![0u8; self.n_tokens];
        for &b in &self.boundaries {
            labels[b] = 1;
        }
        labels
    }
}

/// Positions of 1-labels become boundaries; everything after the last 1 is
/// the open tail.
pub fn build_chunk_map(labels: &[u8]) -> ChunkMap {
    ChunkMap {
        boundaries: labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 1)
            .map(|(i, _)| i)
            .collect(),
        n_tokens: labels.len(),
    }
}

/// Threshold the classifier over hidden states: `1` iff
/// `sigmoid(H_i · W + b) > alpha` (strict).
pub fn predict_boundaries(
    h_l1: &Tensor,
    params: &ChunkAdapterParams,
    alpha: f64,
) -> Result<Vec<u8>> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    if h_l1.cols() != params.d_model() {
        return Err(Error::Shape {
            op: "predict_boundaries",
            detail: format!("hidden width {} vs adapter {}", h_l1.cols(), params.d_model()),
        });
    }
    Ok((0..h_l1.rows())
        .map(|i| if params.prob(h_l1.row(i)) > alpha { 1 } else { 0 })
        .collect())
}

/// Token-level precision/recall/F1 over the boundary class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Undefined ratios (no predicted / no gold positives) resolve to 0.
pub fn eval_boundary_metrics(pred: &[u8], gold: &[u8]) -> Result<BoundaryMetrics> {
    if pred.len() != gold.len() {
        return Err(Error::Input(format!(
            "eval_boundary_metrics: {} predictions vs {} labels",
            pred.len(),
            gold.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &g) in pred.iter().zip(gold) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(BoundaryMetrics { precision, recall, f1 })
}

/// Train the chunk adapter against rule labels with class-weighted BCE. The
/// backbone is frozen: it is only ever read, and its hidden states enter the
/// classifier graph as constants.
///
/// Returns the trained parameters and the per-step loss curve.
pub fn train_chunker(
    backbone: &BackboneWeights,
    docs: &[LabeledDoc],
    cfg: &TrainConfig,
    batch: usize,
    seqlen: usize,
    seed: u64,
) -> Result<(ChunkAdapterParams, Vec<(usize, f64)>)> {
    let batches = make_batches(docs, seqlen, batch);
    if batches.is_empty() {
        return Err(Error::Input("train_chunker: corpus too small for one batch".into()));
    }
    let pos_weight = boundary_pos_weight(docs);
    let mut params = ChunkAdapterParams::init(backbone.config.d_model, seed);
    let mut adam = AdamState::new(
        AdamParams { lr: cfg.lr, ..AdamParams::default() },
        &[params.weight.numel(), params.bias.numel()],
    );
    let mut curve = Vec::with_capacity(cfg.steps);

    // Hidden states per window are recomputed on demand; for desk-scale runs
    // the corpus is small enough to cache them all up front instead.
    let mut hidden_cache: Vec<Option<Vec<Tensor>>> = vec![None; batches.len()];

    for step in 0..cfg.steps {
        let bi = step % batches.len();
        if hidden_cache[bi].is_none() {
            let hs: Vec<Result<Tensor>> = batches[bi]
                .inputs
                .par_iter()
                .map(|inp| layer1_hidden(backbone, inp))
                .collect();
            hidden_cache[bi] = Some(hs.into_iter().collect::<Result<Vec<_>>>()?);
        }
        let hiddens = hidden_cache[bi].as_ref().expect("populated above");

        let mut g = Graph::<f32>::new();
        let w_leaf = g.leaf(params.weight.clone(), "chunk_adapter.weight");
        let b_leaf = g.leaf(params.bias.clone(), "chunk_adapter.bias");
        let mut losses = Vec::new();
        for (item, h) in hiddens.iter().enumerate() {
            let h_const = g.constant(h.clone());
            let z = g.matmul(h_const, w_leaf)?;
            let zb = g.add_bias_row(z, b_leaf)?;
            let p = g.sigmoid(zb)?;
            let labels = std::sync::Arc::new(batches[bi].labels[item].clone());
            losses.push(g.bce(p, labels, pos_weight)?);
        }
        let loss = g.mean_scalars(&losses)?;
        g.backward(loss)?;
        let gw = g.grad(w_leaf).expect("leaf grad").clone();
        let gb = g.grad(b_leaf).expect("leaf grad").clone();
        adam_step(
            &mut [&mut params.weight, &mut params.bias],
            &[&gw, &gb],
            &mut adam,
            cfg.lr_scale(step),
        )?;
        curve.push((step, g.value(loss).item() as f64));
    }
    Ok((params, curve))
}

/// Predicted-vs-oracle boundary metrics over held-out documents.
pub fn eval_chunker(
    backbone: &BackboneWeights,
    params: &ChunkAdapterParams,
    docs: &[LabeledDoc],
    alpha: f64,
) -> Result<BoundaryMetrics> {
    let results: Vec<Result<(Vec<u8>, Vec<u8>)>> = docs
        .par_iter()
        .map(|doc| {
            let h = layer1_hidden(backbone, doc.tokens())?;
            let pred = predict_boundaries(&h, params, alpha)?;
            Ok((pred, doc.labels.clone()))
        })
        .collect();
    let mut pred_all = Vec::new();
    let mut gold_all = Vec::new();
    for r in results {
        let (p, g) = r?;
        pred_all.extend(p);
        gold_all.extend(g);
    }
    eval_boundary_metrics(&pred_all, &gold_all)
}

/// The naive baseline the trained classifier must beat: every '.' is a
/// boundary.
pub fn naive_period_labels(text: &str) -> Vec<u8> {
    text.as_bytes().iter().map(|&b| u8::from(b == b'.')).collect()
}
