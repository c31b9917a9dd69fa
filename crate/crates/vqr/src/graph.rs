//! Reverse-mode automatic differentiation on dense `f64` matrices.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node
//! holding its forward value, and [`Graph::backward`] walks the tape in
//! reverse to accumulate gradients. All values are two-dimensional
//! (`batch x dim`); scalars are `1 x 1`. The tape is rebuilt for every
//! training step and dropped afterwards.
//!
//! Only nodes that transitively depend on a gradient-requiring leaf
//! receive gradients, so subgraphs built from frozen parameters cost
//! nothing on the backward pass and can never push updates into them.

use ndarray::{Array2, Axis};
use std::rc::Rc;

pub type NodeId = usize;

/// Probabilities at or below this floor contribute zero entropy and
/// receive zero gradient (the 0 * ln 0 = 0 convention).
pub const ENTROPY_FLOOR: f64 = 1e-12;

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `(B x D) + (1 x D)`, bias broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `(B x D) * (B x 1)`, column broadcast over dims.
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    GumbelSoftmaxRows {
        logits: NodeId,
        tau: f64,
        /// Soft relaxation kept for the backward pass (the forward value
        /// may be the hard one-hot when straight-through is on).
        soft: Array2<f64>,
    },
    EntropyRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Rc<Vec<usize>>),
    RepeatRows(NodeId, usize),
    Reshape(NodeId),
    RegionPool {
        weights: NodeId,
        feats: Rc<Vec<Array2<f64>>>,
    },
    PickPerRow(NodeId, Rc<Vec<usize>>),
    SumRows(NodeId),
    MeanAll(NodeId),
    Square(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by `NodeId`.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; its gradient is available after `backward`.
    pub fn var(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (_, d) = self.nodes[a].value.dim();
        assert_eq!(self.nodes[bias].value.dim(), (1, d));
        let v = &self.nodes[a].value + &self.nodes[bias].value;
        let ng = self.needs(a) || self.needs(bias);
        self.push(v, Op::AddRow(a, bias), ng)
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (b, _) = self.nodes[a].value.dim();
        assert_eq!(self.nodes[col].value.dim(), (b, 1));
        let v = &self.nodes[a].value * &self.nodes[col].value;
        let ng = self.needs(a) || self.needs(col);
        self.push(v, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = &self.nodes[a].value * k;
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(&self.nodes[a].value);
        let ng = self.needs(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = log_softmax_rows(&self.nodes[a].value);
        let ng = self.needs(a);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    /// Temperature-relaxed categorical sample per row. `noise` must hold
    /// standard Gumbel draws of the same shape as the logits. With
    /// `straight_through` the forward value is the hard one-hot of the
    /// per-row argmax while gradients follow the soft relaxation.
    pub fn gumbel_softmax_rows(
        &mut self,
        logits: NodeId,
        noise: &Array2<f64>,
        tau: f64,
        straight_through: bool,
    ) -> NodeId {
        assert!(tau > 0.0, "gumbel temperature must be positive");
        assert_eq!(self.nodes[logits].value.dim(), noise.dim());
        let perturbed = (&self.nodes[logits].value + noise) / tau;
        let soft = softmax_rows(&perturbed);
        let value = if straight_through {
            let mut hard = Array2::zeros(soft.dim());
            for (b, row) in soft.outer_iter().enumerate() {
                hard[[b, argmax(row.as_slice().unwrap())]] = 1.0;
            }
            hard
        } else {
            soft.clone()
        };
        let ng = self.needs(logits);
        self.push(value, Op::GumbelSoftmaxRows { logits, tau, soft }, ng)
    }

    /// Shannon entropy of each row of a probability matrix, in nats:
    /// `(B x K) -> (B x 1)`. Entries at or below [`ENTROPY_FLOOR`]
    /// contribute zero.
    pub fn entropy_rows(&mut self, probs: NodeId) -> NodeId {
        let p = &self.nodes[probs].value;
        let (b, _) = p.dim();
        let mut out = Array2::zeros((b, 1));
        for (i, row) in p.outer_iter().enumerate() {
            out[[i, 0]] = entropy_slice(row.as_slice().unwrap());
        }
        let ng = self.needs(probs);
        self.push(out, Op::EntropyRows(probs), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let b = self.nodes[parts[0]].value.nrows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.ncols()).sum();
        let mut v = Array2::zeros((b, total));
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            assert_eq!(pv.nrows(), b);
            v.slice_mut(ndarray::s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.nodes[a]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        let ng = self.needs(a);
        self.push(v, Op::SliceCols(a, start, end), ng)
    }

    /// Row lookup: `out[i] = table[ids[i]]`. The exact equivalent of a
    /// one-hot matmul against the table.
    pub fn gather_rows(&mut self, table: NodeId, ids: Rc<Vec<usize>>) -> NodeId {
        let t = &self.nodes[table].value;
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&t.row(id));
        }
        let ng = self.needs(table);
        self.push(v, Op::GatherRows(table, ids), ng)
    }

    /// Interleaved row repetition: `(B x D) -> (B*k x D)` with row
    /// `b*k + j` equal to row `b`.
    pub fn repeat_rows(&mut self, a: NodeId, k: usize) -> NodeId {
        let av = &self.nodes[a].value;
        let (b, d) = av.dim();
        let mut v = Array2::zeros((b * k, d));
        for i in 0..b {
            for j in 0..k {
                v.row_mut(i * k + j).assign(&av.row(i));
            }
        }
        let ng = self.needs(a);
        self.push(v, Op::RepeatRows(a, k), ng)
    }

    /// Row-major reshape to `(rows, cols)`; the element count must match.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let av = &self.nodes[a].value;
        assert_eq!(av.len(), rows * cols);
        let flat: Vec<f64> = av.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        let ng = self.needs(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Attention pooling over per-sample region features:
    /// `out[b] = sum_r weights[b, r] * feats[b][r, :]`. The features are
    /// constants; only the weights receive a gradient.
    pub fn region_pool(&mut self, weights: NodeId, feats: Rc<Vec<Array2<f64>>>) -> NodeId {
        let w = &self.nodes[weights].value;
        let (b, r) = w.dim();
        assert_eq!(feats.len(), b);
        let d = feats[0].ncols();
        let mut v = Array2::zeros((b, d));
        for i in 0..b {
            assert_eq!(feats[i].dim(), (r, d));
            for j in 0..r {
                let wij = w[[i, j]];
                for c in 0..d {
                    v[[i, c]] += wij * feats[i][[j, c]];
                }
            }
        }
        let ng = self.needs(weights);
        self.push(v, Op::RegionPool { weights, feats }, ng)
    }

    /// Per-row element selection: `(B x K) -> (B x 1)` with
    /// `out[b] = x[b, idx[b]]`.
    pub fn pick_per_row(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let av = &self.nodes[a].value;
        assert_eq!(av.nrows(), idx.len());
        let mut v = Array2::zeros((idx.len(), 1));
        for (b, &j) in idx.iter().enumerate() {
            v[[b, 0]] = av[[b, j]];
        }
        let ng = self.needs(a);
        self.push(v, Op::PickPerRow(a, idx), ng)
    }

    /// Row sums: `(B x D) -> (B x 1)`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .to_owned();
        let ng = self.needs(a);
        self.push(v, Op::SumRows(a), ng)
    }

    /// Mean over every element: `-> (1 x 1)`.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let m = av.sum() / av.len() as f64;
        let v = Array2::from_elem((1, 1), m);
        let ng = self.needs(a);
        self.push(v, Op::MeanAll(a), ng)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * x);
        let ng = self.needs(a);
        self.push(v, Op::Square(a), ng)
    }

    /// Backpropagate from a scalar (`1 x 1`) root node.
    pub fn backward(&mut self, root: NodeId) -> Gradients {
        assert_eq!(self.nodes[root].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root].needs_grad {
            grads[root] = Some(Array2::ones((1, 1)));
        }
        for id in (0..=root).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        let d = g.dot(&self.nodes[b].value.t());
                        acc(&mut grads, a, d);
                    }
                    if self.needs(b) {
                        let d = self.nodes[a].value.t().dot(&g);
                        acc(&mut grads, b, d);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        acc(&mut grads, a, g.clone());
                    }
                    if self.needs(b) {
                        acc(&mut grads, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        acc(&mut grads, a, g.clone());
                    }
                    if self.needs(b) {
                        acc(&mut grads, b, -&g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        acc(&mut grads, a, &g * &self.nodes[b].value);
                    }
                    if self.needs(b) {
                        acc(&mut grads, b, &g * &self.nodes[a].value);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.needs(a) {
                        acc(&mut grads, a, g.clone());
                    }
                    if self.needs(bias) {
                        let d = g.sum_axis(Axis(0)).insert_axis(Axis(0)).to_owned();
                        acc(&mut grads, bias, d);
                    }
                }
                Op::MulCol(a, col) => {
                    if self.needs(a) {
                        acc(&mut grads, a, &g * &self.nodes[col].value);
                    }
                    if self.needs(col) {
                        let d = (&g * &self.nodes[a].value)
                            .sum_axis(Axis(1))
                            .insert_axis(Axis(1))
                            .to_owned();
                        acc(&mut grads, col, d);
                    }
                }
                Op::Scale(a, k) => {
                    if self.needs(a) {
                        acc(&mut grads, a, &g * k);
                    }
                }
                Op::Tanh(a) => {
                    if self.needs(a) {
                        let y = &self.nodes[id].value;
                        acc(&mut grads, a, &g * &y.mapv(|t| 1.0 - t * t));
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs(a) {
                        let y = &self.nodes[id].value;
                        acc(&mut grads, a, &g * &y.mapv(|s| s * (1.0 - s)));
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.needs(a) {
                        let y = self.nodes[id].value.clone();
                        acc(&mut grads, a, softmax_backward(&y, &g));
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    if self.needs(a) {
                        let y = &self.nodes[id].value;
                        let p = y.mapv(f64::exp);
                        let row_sum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(&mut grads, a, &g - &(&p * &row_sum));
                    }
                }
                Op::GumbelSoftmaxRows { logits, tau, soft } => {
                    if self.needs(logits) {
                        let d = softmax_backward(&soft, &g) / tau;
                        acc(&mut grads, logits, d);
                    }
                }
                Op::EntropyRows(probs) => {
                    if self.needs(probs) {
                        let p = &self.nodes[probs].value;
                        let mut d = Array2::zeros(p.dim());
                        for (b, row) in p.outer_iter().enumerate() {
                            let gb = g[[b, 0]];
                            for (k, &pk) in row.iter().enumerate() {
                                if pk > ENTROPY_FLOOR {
                                    d[[b, k]] = -gb * (pk.ln() + 1.0);
                                }
                            }
                        }
                        acc(&mut grads, probs, d);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.nodes[p].value.ncols();
                        if self.needs(p) {
                            let d = g.slice(ndarray::s![.., at..at + w]).to_owned();
                            acc(&mut grads, p, d);
                        }
                        at += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    if self.needs(a) {
                        let mut d = Array2::zeros(self.nodes[a].value.dim());
                        d.slice_mut(ndarray::s![.., start..end]).assign(&g);
                        acc(&mut grads, a, d);
                    }
                }
                Op::GatherRows(table, ids) => {
                    if self.needs(table) {
                        let mut d = Array2::zeros(self.nodes[table].value.dim());
                        for (i, &row) in ids.iter().enumerate() {
                            let mut dst = d.row_mut(row);
                            dst += &g.row(i);
                        }
                        acc(&mut grads, table, d);
                    }
                }
                Op::RepeatRows(a, k) => {
                    if self.needs(a) {
                        let (b, d_) = self.nodes[a].value.dim();
                        let mut d = Array2::zeros((b, d_));
                        for i in 0..b {
                            for j in 0..k {
                                let mut dst = d.row_mut(i);
                                dst += &g.row(i * k + j);
                            }
                        }
                        acc(&mut grads, a, d);
                    }
                }
                Op::Reshape(a) => {
                    if self.needs(a) {
                        let (r, c) = self.nodes[a].value.dim();
                        let flat: Vec<f64> = g.iter().copied().collect();
                        let d = Array2::from_shape_vec((r, c), flat).expect("reshape grad");
                        acc(&mut grads, a, d);
                    }
                }
                Op::RegionPool { weights, feats } => {
                    if self.needs(weights) {
                        let (b, r) = self.nodes[weights].value.dim();
                        let mut d = Array2::zeros((b, r));
                        for i in 0..b {
                            for j in 0..r {
                                let mut s = 0.0;
                                for c in 0..feats[i].ncols() {
                                    s += g[[i, c]] * feats[i][[j, c]];
                                }
                                d[[i, j]] = s;
                            }
                        }
                        acc(&mut grads, weights, d);
                    }
                }
                Op::PickPerRow(a, idx) => {
                    if self.needs(a) {
                        let mut d = Array2::zeros(self.nodes[a].value.dim());
                        for (b, &j) in idx.iter().enumerate() {
                            d[[b, j]] += g[[b, 0]];
                        }
                        acc(&mut grads, a, d);
                    }
                }
                Op::SumRows(a) => {
                    if self.needs(a) {
                        let (b, d_) = self.nodes[a].value.dim();
                        let mut d = Array2::zeros((b, d_));
                        for i in 0..b {
                            d.row_mut(i).fill(g[[i, 0]]);
                        }
                        acc(&mut grads, a, d);
                    }
                }
                Op::MeanAll(a) => {
                    if self.needs(a) {
                        let av = &self.nodes[a].value;
                        let d = Array2::from_elem(av.dim(), g[[0, 0]] / av.len() as f64);
                        acc(&mut grads, a, d);
                    }
                }
                Op::Square(a) => {
                    if self.needs(a) {
                        acc(&mut grads, a, &g * &(&self.nodes[a].value * 2.0));
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// dL/dx for y = softmax(x) given dL/dy, row-wise.
fn softmax_backward(y: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut d = Array2::zeros(y.dim());
    for b in 0..y.nrows() {
        let mut dot = 0.0;
        for k in 0..y.ncols() {
            dot += g[[b, k]] * y[[b, k]];
        }
        for k in 0..y.ncols() {
            d[[b, k]] = y[[b, k]] * (g[[b, k]] - dot);
        }
    }
    d
}

/// Numerically stable row-wise softmax (shift by the row max).
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (b, row) in x.outer_iter().enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (k, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[[b, k]] = e;
            sum += e;
        }
        for k in 0..row.len() {
            out[[b, k]] /= sum;
        }
    }
    out
}

pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (b, row) in x.outer_iter().enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for (k, &v) in row.iter().enumerate() {
            out[[b, k]] = v - lse;
        }
    }
    out
}

/// Shannon entropy in nats of a probability slice, with the
/// `0 * ln 0 = 0` convention.
pub fn entropy_slice(probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in probs {
        if p > ENTROPY_FLOOR {
            h -= p * p.ln();
        }
    }
    h
}

/// Index of the largest element; first occurrence wins on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
