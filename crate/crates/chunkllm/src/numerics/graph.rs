//! Reverse-mode autodiff on an eagerly-evaluated tape.
//!
//! Nodes are appended in topological order and evaluated on insertion;
//! `backward` sweeps the tape in reverse with a fixed traversal order so
//! gradient accumulation is deterministic. `recompute` re-evaluates the whole
//! tape after leaf mutation, which is what the finite-difference oracle needs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    gelu_grad_scalar, gelu_scalar, rope_freqs, rope_rotate_row, sigmoid_scalar, Elem, SoftmaxMask,
    Tensor, BCE_CLAMP, KL_CLAMP, RMSNORM_EPS,
};
use crate::{Error, Result};

pub type NodeId = usize;

/// Mask argument for graph softmax nodes.
#[derive(Debug, Clone)]
pub enum GraphMask {
    None,
    Causal,
    Keep(Arc<Vec<bool>>),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { ta: bool, tb: bool },
    Add,
    Sub,
    MulElem,
    Scale(f64),
    AddBiasRow,
    Gelu,
    Sigmoid,
    SoftmaxRows(GraphMask),
    Rope { positions: Arc<Vec<usize>>, base: f64 },
    RmsNorm,
    Embed { tokens: Arc<Vec<usize>> },
    ConcatCols,
    SliceCols { start: usize, len: usize },
    SliceRows { start: usize, len: usize },
    CrossEntropy { targets: Arc<Vec<usize>> },
    Bce { labels: Arc<Vec<u8>>, pos_weight: f64 },
    KlDivRows { row_mask: Arc<Vec<bool>> },
    MeanScalars,
    SumAll,
}

#[derive(Debug)]
struct Node<E: Elem> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    trainable: bool,
    name: Option<String>,
}

/// Operation tape with named trainable leaves.
#[derive(Debug, Default)]
pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable parameter leaf.
    pub fn leaf(&mut self, value: Tensor<E>, name: &str) -> NodeId {
        self.push_node(Op::Leaf, vec![], value, true, Some(name.to_string()))
    }

    /// Non-trainable input (data, teacher targets, frozen weights).
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push_node(Op::Leaf, vec![], value, false, None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.nodes[id].grad.as_ref()
    }

    pub fn name(&self, id: NodeId) -> Option<&str> {
        self.nodes[id].name.as_deref()
    }

    pub fn trainable_leaves(&self) -> Vec<NodeId> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].trainable).collect()
    }

    /// Replace a leaf's value (shape-checked). Downstream values are stale
    /// until [`Graph::recompute`] runs.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor<E>) -> Result<()> {
        if !matches!(self.nodes[id].op, Op::Leaf) {
            return Err(Error::Input(format!("node {id} is not a leaf")));
        }
        if self.nodes[id].value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_leaf",
                detail: format!(
                    "leaf {:?} vs new {:?}",
                    self.nodes[id].value.shape(),
                    value.shape()
                ),
            });
        }
        self.nodes[id].value = value;
        Ok(())
    }

    fn push_node(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        value: Tensor<E>,
        trainable: bool,
        name: Option<String>,
    ) -> NodeId {
        self.nodes.push(Node { op, inputs, value, grad: None, trainable, name });
        self.nodes.len() - 1
    }

    fn push_op(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let vals: Vec<&Tensor<E>> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let value = eval_op::<E>(&op, &vals)?;
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        Ok(self.push_node(op, inputs, value, false, None))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Matmul { ta: false, tb: false }, vec![a, b])
    }

    pub fn matmul_ex(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        self.push_op(Op::Matmul { ta, tb }, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Sub, vec![a, b])
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::MulElem, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push_op(Op::Scale(s), vec![a])
    }

    /// `X[m×n] + b[n]`, broadcast over rows.
    pub fn add_bias_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::AddBiasRow, vec![x, b])
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Op::Gelu, vec![x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Op::Sigmoid, vec![x])
    }

    pub fn softmax_rows(&mut self, x: NodeId, mask: GraphMask) -> Result<NodeId> {
        self.push_op(Op::SoftmaxRows(mask), vec![x])
    }

    /// Rotary embedding over a `[n × w]` matrix (w even), one position per row.
    pub fn rope(&mut self, x: NodeId, positions: Arc<Vec<usize>>, base: f64) -> Result<NodeId> {
        self.push_op(Op::Rope { positions, base }, vec![x])
    }

    pub fn rmsnorm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        self.push_op(Op::RmsNorm, vec![x, gain])
    }

    /// Row gather from an embedding table.
    pub fn embed(&mut self, table: NodeId, tokens: Arc<Vec<usize>>) -> Result<NodeId> {
        self.push_op(Op::Embed { tokens }, vec![table])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push_op(Op::ConcatCols, parts.to_vec())
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push_op(Op::SliceCols { start, len }, vec![x])
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push_op(Op::SliceRows { start, len }, vec![x])
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: Arc<Vec<usize>>) -> Result<NodeId> {
        self.push_op(Op::CrossEntropy { targets }, vec![logits])
    }

    pub fn bce(&mut self, probs: NodeId, labels: Arc<Vec<u8>>, pos_weight: f64) -> Result<NodeId> {
        self.push_op(Op::Bce { labels, pos_weight }, vec![probs])
    }

    pub fn kl_div_rows(&mut self, p: NodeId, q: NodeId, row_mask: Arc<Vec<bool>>) -> Result<NodeId> {
        self.push_op(Op::KlDivRows { row_mask }, vec![p, q])
    }

    pub fn mean_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push_op(Op::MeanScalars, parts.to_vec())
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Op::SumAll, vec![x])
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Re-evaluate every non-leaf node in tape order (after leaf mutation).
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let vals: Vec<&Tensor<E>> =
                self.nodes[i].inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let value = eval_op::<E>(&self.nodes[i].op, &vals)?;
            if !value.all_finite() {
                return Err(Error::NonFinite { op: op_name(&self.nodes[i].op) });
            }
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<E>) {
        debug_assert_eq!(self.nodes[id].value.shape(), delta.shape());
        match &mut self.nodes[id].grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            None => self.nodes[id].grad = Some(delta),
        }
    }

    /// Reverse sweep from a scalar loss. Interior gradients are released as
    /// soon as they have been propagated; trainable leaves keep theirs.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::Domain {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.nodes[loss].value.shape()),
            });
        }
        self.zero_grads();
        self.nodes[loss].grad = Some(Tensor::new(
            self.nodes[loss].value.shape().to_vec(),
            vec![E::ONE],
        )?);
        for i in (0..=loss).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else { continue };
            let deltas = self.backprop_node(i, &gout)?;
            for (input, delta) in deltas {
                self.accumulate(input, delta);
            }
        }
        // Unreached trainable leaves still get a zero gradient of the right
        // shape so optimizer plumbing never sees a missing entry.
        for n in &mut self.nodes {
            if n.trainable && n.grad.is_none() {
                n.grad = Some(Tensor::zeros(n.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: NodeId, gout: &Tensor<E>) -> Result<Vec<(NodeId, Tensor<E>)>> {
        let node = &self.nodes[i];
        let inp = |k: usize| -> &Tensor<E> { &self.nodes[node.inputs[k]].value };
        let mut out: Vec<(NodeId, Tensor<E>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { ta, tb } => {
                let (a, b) = (inp(0), inp(1));
                let (da, db) = match (ta, tb) {
                    (false, false) => (
                        super::matmul_ex(gout, false, b, true)?,
                        super::matmul_ex(a, true, gout, false)?,
                    ),
                    (true, false) => (
                        super::matmul_ex(b, false, gout, true)?,
                        super::matmul_ex(a, false, gout, false)?,
                    ),
                    (false, true) => (
                        super::matmul_ex(gout, false, b, false)?,
                        super::matmul_ex(gout, true, a, false)?,
                    ),
                    (true, true) => (
                        super::matmul_ex(b, true, gout, true)?,
                        super::matmul_ex(gout, true, a, true)?,
                    ),
                };
                out.push((node.inputs[0], da));
                out.push((node.inputs[1], db));
            }
            Op::Add => {
                out.push((node.inputs[0], gout.clone()));
                out.push((node.inputs[1], gout.clone()));
            }
            Op::Sub => {
                out.push((node.inputs[0], gout.clone()));
                let mut neg = gout.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                out.push((node.inputs[1], neg));
            }
            Op::MulElem => {
                let (a, b) = (inp(0), inp(1));
                let mut da = gout.clone();
                for (d, s) in da.data_mut().iter_mut().zip(b.data()) {
                    *d = *d * *s;
                }
                let mut db = gout.clone();
                for (d, s) in db.data_mut().iter_mut().zip(a.data()) {
                    *d = *d * *s;
                }
                out.push((node.inputs[0], da));
                out.push((node.inputs[1], db));
            }
            Op::Scale(s) => {
                let mut da = gout.clone();
                let sf = E::from_f64(*s);
                for v in da.data_mut() {
                    *v = *v * sf;
                }
                out.push((node.inputs[0], da));
            }
            Op::AddBiasRow => {
                let n = inp(0).cols();
                out.push((node.inputs[0], gout.clone()));
                let mut db = Tensor::zeros(vec![n]);
                for row in 0..gout.rows() {
                    for (d, g) in db.data_mut().iter_mut().zip(gout.row(row)) {
                        *d += *g;
                    }
                }
                out.push((node.inputs[1], db));
            }
            Op::Gelu => {
                let x = inp(0);
                let mut dx = gout.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
                    *d = E::from_f64(d.to_f64() * gelu_grad_scalar(v.to_f64()));
                }
                out.push((node.inputs[0], dx));
            }
            Op::Sigmoid => {
                let y = &node.value;
                let mut dx = gout.clone();
                for (d, s) in dx.data_mut().iter_mut().zip(y.data()) {
                    let sf = s.to_f64();
                    *d = E::from_f64(d.to_f64() * sf * (1.0 - sf));
                }
                out.push((node.inputs[0], dx));
            }
            Op::SoftmaxRows(_) => {
                // dX = A ⊙ (dA − rowdot(dA, A)); masked entries are exactly 0
                // in A, so they contribute nothing and receive nothing.
                let a = &node.value;
                let (m, n) = (a.rows(), a.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    let arow = a.row(r);
                    let grow = gout.row(r);
                    let dot: f64 =
                        arow.iter().zip(grow).map(|(p, g)| p.to_f64() * g.to_f64()).sum();
                    let drow = &mut dx.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        drow[j] =
                            E::from_f64(arow[j].to_f64() * (grow[j].to_f64() - dot));
                    }
                }
                out.push((node.inputs[0], dx));
            }
            Op::Rope { positions, base } => {
                let w = inp(0).cols();
                let freqs = rope_freqs(w, *base);
                let mut dx = gout.clone();
                for (r, &pos) in positions.iter().enumerate() {
                    let row = &mut dx.data_mut()[r * w..(r + 1) * w];
                    rope_rotate_row(row, pos, &freqs, true);
                }
                out.push((node.inputs[0], dx));
            }
            Op::RmsNorm => {
                let (x, gain) = (inp(0), inp(1));
                let (n, d) = (x.rows(), x.cols());
                let mut dx = Tensor::zeros(vec![n, d]);
                let mut dg = Tensor::zeros(vec![d]);
                for r in 0..n {
                    let xrow = x.row(r);
                    let grow = gout.row(r);
                    let ms =
                        xrow.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>() / d as f64;
                    let inv = 1.0 / (ms + RMSNORM_EPS).sqrt();
                    let inner: f64 = (0..d)
                        .map(|j| grow[j].to_f64() * xrow[j].to_f64() * gain.data()[j].to_f64())
                        .sum();
                    let coef = inv * inv * inv / d as f64;
                    let dxrow = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xv = xrow[j].to_f64();
                        dxrow[j] = E::from_f64(
                            inv * gain.data()[j].to_f64() * grow[j].to_f64()
                                - coef * xv * inner,
                        );
                        dg.data_mut()[j] += E::from_f64(xv * inv * grow[j].to_f64());
                    }
                }
                out.push((node.inputs[0], dx));
                out.push((node.inputs[1], dg));
            }
            Op::Embed { tokens } => {
                let table = inp(0);
                let d = table.cols();
                let mut dt = Tensor::zeros(table.shape().to_vec());
                for (r, &tok) in tokens.iter().enumerate() {
                    let dst = &mut dt.data_mut()[tok * d..(tok + 1) * d];
                    for (a, b) in dst.iter_mut().zip(gout.row(r)) {
                        *a += *b;
                    }
                }
                out.push((node.inputs[0], dt));
            }
            Op::ConcatCols => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut start = 0usize;
                for &input in &node.inputs {
                    let w = self.nodes[input].value.cols();
                    let mut part = Tensor::zeros(vec![rows, w]);
                    for r in 0..rows {
                        let src = &gout.row(r)[start..start + w];
                        part.data_mut()[r * w..(r + 1) * w].copy_from_slice(src);
                    }
                    out.push((input, part));
                    start += w;
                }
                debug_assert_eq!(start, total);
            }
            Op::SliceCols { start, len } => {
                let x = inp(0);
                let (m, n) = (x.rows(), x.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    let dst = &mut dx.data_mut()[r * n + start..r * n + start + len];
                    dst.copy_from_slice(gout.row(r));
                }
                out.push((node.inputs[0], dx));
            }
            Op::SliceRows { start, len } => {
                let x = inp(0);
                let (m, n) = (x.rows(), x.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                dx.data_mut()[start * n..(start + len) * n].copy_from_slice(gout.data());
                out.push((node.inputs[0], dx));
            }
            Op::CrossEntropy { targets } => {
                let logits = inp(0);
                let (n, _v) = (logits.rows(), logits.cols());
                let probs = super::softmax_rows(logits, None)?;
                let mut dl = probs;
                let scale = gout.item().to_f64() / n as f64;
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut dl.data_mut()[r * logits.cols()..(r + 1) * logits.cols()];
                    row[t] = row[t] - E::ONE;
                    for v in row.iter_mut() {
                        *v = E::from_f64(v.to_f64() * scale);
                    }
                }
                out.push((node.inputs[0], dl));
            }
            Op::Bce { labels, pos_weight } => {
                let probs = inp(0);
                let n = probs.numel() as f64;
                let scale = gout.item().to_f64() / n;
                let mut dp = Tensor::zeros(probs.shape().to_vec());
                for (j, (d, p)) in dp.data_mut().iter_mut().zip(probs.data()).enumerate() {
                    let pf = p.to_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    let g = if labels[j] == 1 { -pos_weight / pf } else { 1.0 / (1.0 - pf) };
                    *d = E::from_f64(g * scale);
                }
                out.push((node.inputs[0], dp));
            }
            Op::KlDivRows { row_mask } => {
                let (p, q) = (inp(0), inp(1));
                let (m, n) = (p.rows(), p.cols());
                let rows = row_mask.iter().filter(|&&b| b).count() as f64;
                let scale = gout.item().to_f64() / rows;
                let mut dp = Tensor::zeros(vec![m, n]);
                let mut dq = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    if !row_mask[r] {
                        continue;
                    }
                    for j in 0..n {
                        let pv = p.at2(r, j).to_f64();
                        if pv <= 0.0 {
                            continue;
                        }
                        let qraw = q.at2(r, j).to_f64();
                        let qv = qraw.max(KL_CLAMP);
                        dp.data_mut()[r * n + j] =
                            E::from_f64(((pv.max(KL_CLAMP) / qv).ln() + 1.0) * scale);
                        if qraw >= KL_CLAMP {
                            dq.data_mut()[r * n + j] = E::from_f64(-(pv / qv) * scale);
                        }
                    }
                }
                out.push((node.inputs[0], dp));
                out.push((node.inputs[1], dq));
            }
            Op::MeanScalars => {
                let share = E::from_f64(gout.item().to_f64() / node.inputs.len() as f64);
                for &input in &node.inputs {
                    out.push((input, Tensor::scalar(share)));
                }
            }
            Op::SumAll => {
                let x = inp(0);
                let g = gout.item();
                let mut dx = Tensor::zeros(x.shape().to_vec());
                for v in dx.data_mut() {
                    *v = g;
                }
                out.push((node.inputs[0], dx));
            }
        }
        Ok(out)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::MulElem => "mul_elem",
        Op::Scale(_) => "scale",
        Op::AddBiasRow => "add_bias_row",
        Op::Gelu => "gelu",
        Op::Sigmoid => "sigmoid",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::Rope { .. } => "rope",
        Op::RmsNorm => "rmsnorm",
        Op::Embed { .. } => "embed",
        Op::ConcatCols => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Bce { .. } => "bce",
        Op::KlDivRows { .. } => "kl_div_rows",
        Op::MeanScalars => "mean_scalars",
        Op::SumAll => "sum_all",
    }
}

fn eval_op<E: Elem>(op: &Op, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    match op {
        Op::Leaf => unreachable!("leaves are never re-evaluated"),
        Op::Matmul { ta, tb } => super::matmul_ex(inputs[0], *ta, inputs[1], *tb),
        Op::Add | Op::Sub | Op::MulElem => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::Shape {
                    op: op_name(op),
                    detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
                });
            }
            let mut out = a.clone();
            match op {
                Op::Add => {
                    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
                        *x = *x + *y;
                    }
                }
                Op::Sub => {
                    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
                        *x = *x - *y;
                    }
                }
                _ => {
                    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
                        *x = *x * *y;
                    }
                }
            }
            Ok(out)
        }
        Op::Scale(s) => {
            let mut out = inputs[0].clone();
            let sf = E::from_f64(*s);
            for v in out.data_mut() {
                *v = *v * sf;
            }
            Ok(out)
        }
        Op::AddBiasRow => {
            let (x, b) = (inputs[0], inputs[1]);
            let n = x.cols();
            if b.numel() != n {
                return Err(Error::Shape {
                    op: "add_bias_row",
                    detail: format!("bias {} for width {}", b.numel(), n),
                });
            }
            let mut out = x.clone();
            for r in 0..x.rows() {
                let row = &mut out.data_mut()[r * n..(r + 1) * n];
                for (v, bb) in row.iter_mut().zip(b.data()) {
                    *v = *v + *bb;
                }
            }
            Ok(out)
        }
        Op::Gelu => {
            let mut out = inputs[0].clone();
            for v in out.data_mut() {
                *v = E::from_f64(gelu_scalar(v.to_f64()));
            }
            Ok(out)
        }
        Op::Sigmoid => {
            let mut out = inputs[0].clone();
            for v in out.data_mut() {
                *v = E::from_f64(sigmoid_scalar(v.to_f64()));
            }
            Ok(out)
        }
        Op::SoftmaxRows(mask) => match mask {
            GraphMask::None => super::softmax_rows(inputs[0], None),
            GraphMask::Causal => super::softmax_rows(inputs[0], Some(SoftmaxMask::Causal)),
            GraphMask::Keep(k) => super::softmax_rows(inputs[0], Some(SoftmaxMask::Keep(k))),
        },
        Op::Rope { positions, base } => {
            let x = inputs[0];
            let (n, w) = (x.rows(), x.cols());
            if w % 2 != 0 {
                return Err(Error::Config(format!("rope: width {w} must be even")));
            }
            if positions.len() != n {
                return Err(Error::Input(format!("rope: {} positions for {n} rows", positions.len())));
            }
            let freqs = rope_freqs(w, *base);
            let mut out = x.clone();
            for (r, &pos) in positions.iter().enumerate() {
                rope_rotate_row(&mut out.data_mut()[r * w..(r + 1) * w], pos, &freqs, false);
            }
            Ok(out)
        }
        Op::RmsNorm => super::rmsnorm(inputs[0], inputs[1]),
        Op::Embed { tokens } => {
            let table = inputs[0];
            let (v, d) = (table.rows(), table.cols());
            let mut out = Tensor::zeros(vec![tokens.len(), d]);
            for (r, &tok) in tokens.iter().enumerate() {
                if tok >= v {
                    return Err(Error::Index { op: "embed", index: tok, bound: v });
                }
                out.data_mut()[r * d..(r + 1) * d].copy_from_slice(table.row(tok));
            }
            Ok(out)
        }
        Op::ConcatCols => {
            let rows = inputs[0].rows();
            let total: usize = inputs.iter().map(|t| t.cols()).sum();
            for t in inputs {
                if t.rows() != rows {
                    return Err(Error::Shape {
                        op: "concat_cols",
                        detail: "row counts differ".into(),
                    });
                }
            }
            let mut out = Tensor::zeros(vec![rows, total]);
            for r in 0..rows {
                let mut off = 0usize;
                for t in inputs {
                    let w = t.cols();
                    out.data_mut()[r * total + off..r * total + off + w]
                        .copy_from_slice(t.row(r));
                    off += w;
                }
            }
            Ok(out)
        }
        Op::SliceCols { start, len } => {
            let x = inputs[0];
            let (m, n) = (x.rows(), x.cols());
            if start + len > n {
                return Err(Error::Index { op: "slice_cols", index: start + len, bound: n });
            }
            let mut out = Tensor::zeros(vec![m, *len]);
            for r in 0..m {
                out.data_mut()[r * len..(r + 1) * len]
                    .copy_from_slice(&x.row(r)[*start..start + len]);
            }
            Ok(out)
        }
        Op::SliceRows { start, len } => {
            let x = inputs[0];
            let (m, n) = (x.rows(), x.cols());
            if start + len > m {
                return Err(Error::Index { op: "slice_rows", index: start + len, bound: m });
            }
            Tensor::new(vec![*len, n], x.data()[start * n..(start + len) * n].to_vec())
        }
        Op::CrossEntropy { targets } => {
            let v = super::cross_entropy_loss(inputs[0], targets)?;
            Ok(Tensor::scalar(E::from_f64(v)))
        }
        Op::Bce { labels, pos_weight } => {
            let v = super::bce_loss(inputs[0], labels, *pos_weight)?;
            Ok(Tensor::scalar(E::from_f64(v)))
        }
        Op::KlDivRows { row_mask } => {
            let v = super::kl_div_rows(inputs[0], inputs[1], row_mask)?;
            Ok(Tensor::scalar(E::from_f64(v)))
        }
        Op::MeanScalars => {
            let mut total = 0.0f64;
            for t in inputs {
                if !t.is_scalar() {
                    return Err(Error::Shape {
                        op: "mean_scalars",
                        detail: format!("non-scalar input {:?}", t.shape()),
                    });
                }
                total += t.item().to_f64();
            }
            Ok(Tensor::scalar(E::from_f64(total / inputs.len() as f64)))
        }
        Op::SumAll => {
            let mut total = E::ZERO;
            for v in inputs[0].data() {
                total += *v;
            }
            Ok(Tensor::scalar(total))
        }
    }
}

/// Compare autodiff gradients against central differences at `samples`
/// randomly chosen trainable-parameter coordinates. Returns the max relative
/// error `|ad − fd| / max(1e-8, |ad| + |fd|)`.
///
/// Implemented for 64-bit graphs only: 32-bit finite differences would drown
/// in roundoff.
pub fn finite_diff_check(
    g: &mut Graph<f64>,
    loss: NodeId,
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    g.backward(loss)?;
    let leaves = g.trainable_leaves();
    if leaves.is_empty() {
        return Err(Error::Domain { op: "finite_diff_check", detail: "no trainable leaves".into() });
    }
    let ad_grads: Vec<Tensor<f64>> = leaves
        .iter()
        .map(|&id| g.grad(id).expect("backward populates every trainable leaf").clone())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let li = rng.gen_range(0..leaves.len());
        let leaf = leaves[li];
        let ci = rng.gen_range(0..g.value(leaf).numel());
        let original = g.value(leaf).data()[ci];

        let probe = |v: f64, g: &mut Graph<f64>| -> Result<f64> {
            let mut t = g.value(leaf).clone();
            t.data_mut()[ci] = v;
            g.set_leaf(leaf, t)?;
            g.recompute()?;
            Ok(g.value(loss).item())
        };
        let plus = probe(original + h, g)?;
        let minus = probe(original - h, g)?;
        probe(original, g)?; // restore

        let fd = (plus - minus) / (2.0 * h);
        let ad = ad_grads[li].data()[ci];
        let rel = (ad - fd).abs() / (1e-8f64).max(ad.abs() + fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}
