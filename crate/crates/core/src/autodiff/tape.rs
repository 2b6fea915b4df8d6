//! Reverse-mode tape over dense 2-D tensors.
//!
//! Every op appends one node; nodes are created in topological order, so the
//! backward pass is a single sweep over the node list from the loss down.
//! Parameter leaves are cached per tape, so a parameter read twice is one
//! node and its gradient contributions are summed.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

use super::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum LeafKind {
    /// `base + value` (what the network computes with).
    Effective,
    /// `value` alone (the trainable delta when a base is present).
    Delta,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    Highway { gate: Var, cand: Var, carry: Var },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Blend { a: Var, b: Var, mask: Vec<f64> },
    MaskedMax { xs: Vec<Var>, argmax: Vec<usize> },
    SumAll(Var),
    SumCols(Var),
    Mean(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    Pick { x: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Tensor },
    WeightedSum { alpha: Var, states: Vec<Var> },
    MulConst { x: Var, k: Tensor },
    Transpose(Var),
    RowNormSum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::Highway { .. } => "highway",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather",
            Op::Blend { .. } => "blend",
            Op::MaskedMax { .. } => "masked_max",
            Op::SumAll(_) => "sum_all",
            Op::SumCols(_) => "sum_cols",
            Op::Mean(_) => "mean",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Pick { .. } => "pick",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::MulConst { .. } => "mul_const",
            Op::Transpose(_) => "transpose",
            Op::RowNormSum(_) => "row_norm_sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Rows whose l2 norm is at or below this get a zero subgradient in [`Tape::row_norm_sum`].
pub const ROW_NORM_EPS: f64 = 1e-12;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients of a scalar loss with respect to the parameters read on the tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    /// The gradient for `id`, or zeros shaped like its value when the loss never touched it.
    pub fn get_or_zero(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.map.get(&id).cloned().unwrap_or_else(|| {
            let (r, c) = store.value(id).shape();
            Tensor::zeros(r, c)
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().map(Tensor::frobenius_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        for g in self.map.values_mut() {
            for x in g.data_mut() {
                *x *= alpha;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: HashMap<(ParamId, LeafKind), Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant: receives gradient but nothing is reported for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(None))
    }

    /// The parameter as the network sees it (`base + value` when a frozen base exists).
    /// Its gradient is reported under `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&(id, LeafKind::Effective)) {
            return v;
        }
        let v = self.push(store.get(id).effective(), Op::Leaf(Some(id)));
        self.leaves.insert((id, LeafKind::Effective), v);
        v
    }

    /// Only the trainable part of the parameter (the delta when a base exists).
    pub fn delta(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if store.get(id).base.is_none() {
            return self.param(store, id);
        }
        if let Some(&v) = self.leaves.get(&(id, LeafKind::Delta)) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf(Some(id)));
        self.leaves.insert((id, LeafKind::Delta), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`; weights stored as `out x in` are applied this way.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_row_assign(self.value(row));
        self.push(value, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let value = self.value(a).scale(alpha);
        self.push(value, Op::Affine(a, alpha))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a))
    }

    /// `gate ⊙ cand + (1 - gate) ⊙ carry`.
    pub fn highway(&mut self, gate: Var, cand: Var, carry: Var) -> Var {
        let g = self.value(gate);
        let f = self.value(cand);
        let h = self.value(carry);
        assert_eq!(g.shape(), f.shape(), "highway: gate/candidate shape mismatch");
        assert_eq!(g.shape(), h.shape(), "highway: gate/carry shape mismatch");
        let data = g
            .data()
            .iter()
            .zip(f.data())
            .zip(h.data())
            .map(|((&c, &f), &h)| c * f + (1.0 - c) * h)
            .collect();
        let value = Tensor::from_vec(g.rows(), g.cols(), data);
        self.push(value, Op::Highway { gate, cand, carry })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols: row count mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        assert!(start + len <= v.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(v.rows(), len);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < t.rows(), "gather: id {id} out of range ({} rows)", t.rows());
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    /// Per-row select: row `r` is `m_r · a_r + (1 - m_r) · b_r`.
    pub fn blend(&mut self, a: Var, b: Var, mask: &[f64]) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "blend: shape mismatch");
        assert_eq!(mask.len(), va.rows(), "blend: mask length mismatch");
        let mut out = Tensor::zeros(va.rows(), va.cols());
        for (r, &m) in mask.iter().enumerate() {
            for ((o, x), y) in out.row_mut(r).iter_mut().zip(va.row(r)).zip(vb.row(r)) {
                *o = m * x + (1.0 - m) * y;
            }
        }
        self.push(out, Op::Blend { a, b, mask: mask.to_vec() })
    }

    /// Element-wise max over a sequence of `B x D` states, restricted per row to
    /// the steps flagged valid in `valid[t][b]`. Each row needs at least one valid step.
    /// Ties go to the earliest step.
    pub fn masked_max(&mut self, xs: &[Var], valid: &[Vec<bool>]) -> Var {
        assert!(!xs.is_empty(), "masked_max over an empty sequence");
        assert_eq!(xs.len(), valid.len(), "masked_max: mask length mismatch");
        let (rows, cols) = self.shape(xs[0]);
        let mut out = Tensor::filled(rows, cols, f64::NEG_INFINITY);
        let mut argmax = vec![usize::MAX; rows * cols];
        for (t, &x) in xs.iter().enumerate() {
            let v = self.value(x);
            assert_eq!(v.shape(), (rows, cols), "masked_max: shape mismatch");
            for r in 0..rows {
                if !valid[t][r] {
                    continue;
                }
                for c in 0..cols {
                    let k = r * cols + c;
                    let val = v.get(r, c);
                    if argmax[k] == usize::MAX || val > out.data()[k] {
                        out.data_mut()[k] = val;
                        argmax[k] = t;
                    }
                }
            }
        }
        assert!(
            argmax.iter().all(|&t| t != usize::MAX),
            "masked_max: a row has no valid step"
        );
        self.push(out, Op::MaskedMax { xs: xs.to_vec(), argmax })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    /// Row sums as a `B x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let value = Tensor::from_vec(v.rows(), 1, data);
        self.push(value, Op::SumCols(a))
    }

    /// Element-wise mean of same-shaped tensors.
    pub fn mean(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "mean of nothing");
        if xs.len() == 1 {
            return xs[0];
        }
        let mut acc = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            acc.add_assign(self.value(x));
        }
        let n = xs.len() as f64;
        for v in acc.data_mut() {
            *v /= n;
        }
        self.push(acc, Op::Mean(xs.to_vec()))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a), None);
        self.push(value, Op::Softmax(a))
    }

    /// Row-wise softmax where `mask[r][c] == false` entries get probability exactly 0.
    pub fn masked_softmax(&mut self, a: Var, mask: &[Vec<bool>]) -> Var {
        let value = softmax_rows(self.value(a), Some(mask));
        self.push(value, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = v.clone();
        for r in 0..v.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Picks column `idx[r]` of each row into a `B x 1` column.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x);
        assert_eq!(idx.len(), v.rows(), "pick: index count mismatch");
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < v.cols(), "pick: column {c} out of range");
                v.get(r, c)
            })
            .collect();
        let value = Tensor::from_vec(v.rows(), 1, data);
        self.push(value, Op::Pick { x, idx: idx.to_vec() })
    }

    /// Weighted mean of per-row softmax cross-entropy:
    /// `Σ_r w_r · (-log softmax(logits_r)[t_r]) / Σ_r w_r`.
    /// Rows with zero weight are ignored; all-zero weights give 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let v = self.value(logits);
        assert_eq!(targets.len(), v.rows(), "cross_entropy: target count mismatch");
        assert_eq!(weights.len(), v.rows(), "cross_entropy: weight count mismatch");
        let probs = softmax_rows(v, None);
        let total: f64 = weights.iter().sum();
        let mut loss = 0.0;
        if total > 0.0 {
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                assert!(t < v.cols(), "cross_entropy: target {t} out of range");
                if w == 0.0 {
                    continue;
                }
                let row = v.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                loss += w * (lse - row[t]);
            }
            loss /= total;
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// `Σ_i alpha[:, i] ⊙ states[i]` for `alpha: B x S` and `S` states of shape `B x D`.
    pub fn weighted_sum(&mut self, alpha: Var, states: &[Var]) -> Var {
        let a = self.value(alpha);
        assert_eq!(a.cols(), states.len(), "weighted_sum: alpha width != state count");
        let (rows, cols) = self.shape(states[0]);
        assert_eq!(a.rows(), rows, "weighted_sum: batch mismatch");
        let mut out = Tensor::zeros(rows, cols);
        for (i, &s) in states.iter().enumerate() {
            let sv = self.value(s);
            assert_eq!(sv.shape(), (rows, cols), "weighted_sum: state shape mismatch");
            for r in 0..rows {
                let w = a.get(r, i);
                for (o, x) in out.row_mut(r).iter_mut().zip(sv.row(r)) {
                    *o += w * x;
                }
            }
        }
        self.push(out, Op::WeightedSum { alpha, states: states.to_vec() })
    }

    /// Element-wise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, k: Tensor) -> Var {
        let value = self.value(x).zip_map(&k, |a, b| a * b);
        self.push(value, Op::MulConst { x, k })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    /// `Σ_i ‖x[i, :]‖₂`, with subgradient 0 on rows of norm ≤ [`ROW_NORM_EPS`].
    pub fn row_norm_sum(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let total = (0..v.rows())
            .map(|r| v.row(r).iter().map(|a| a * a).sum::<f64>().sqrt())
            .sum();
        self.push(Tensor::scalar(total), Op::RowNormSum(x))
    }

    /// Reverse sweep from a `1 x 1` loss. Returns gradients for every parameter
    /// leaf the loss depends on; absent entries are exactly zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got a {}x{} tensor",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.is_finite() {
                return Err(Error::Numeric {
                    op: node.op.name().to_string(),
                    detail: format!("non-finite forward value at node {i}"),
                });
            }
            if !g.is_finite() {
                return Err(Error::Numeric {
                    op: node.op.name().to_string(),
                    detail: format!("non-finite gradient at node {i}"),
                });
            }
            self.backprop_node(i, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf(param) => {
                if let Some(id) = param {
                    match out.map.get_mut(id) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            out.map.insert(*id, g);
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = Tensor::zeros(va.rows(), va.cols());
                gemm(1.0, &g, false, vb, true, 0.0, &mut da);
                let mut db = Tensor::zeros(vb.rows(), vb.cols());
                gemm(1.0, va, true, &g, false, 0.0, &mut db);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = Tensor::zeros(va.rows(), va.cols());
                gemm(1.0, &g, false, vb, false, 0.0, &mut da);
                let mut db = Tensor::zeros(vb.rows(), vb.cols());
                gemm(1.0, &g, true, va, false, 0.0, &mut db);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                acc(grads, *row, g.sum_rows());
                acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *b, g.scale(-1.0));
                acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(*b), |g, y| g * y);
                let db = g.zip_map(self.value(*a), |g, x| g * x);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Affine(a, alpha) => acc(grads, *a, g.scale(*alpha)),
            Op::Sigmoid(a) => acc(grads, *a, g.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Tanh(a) => acc(grads, *a, g.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(grads, *a, g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Exp(a) => acc(grads, *a, g.zip_map(y, |g, e| g * e)),
            Op::Abs(a) => {
                let x = self.value(*a);
                acc(grads, *a, g.zip_map(x, |g, x| g * sign(x)));
            }
            Op::Highway { gate, cand, carry } => {
                let (c, f, h) = (self.value(*gate), self.value(*cand), self.value(*carry));
                let mut dc = Tensor::zeros(c.rows(), c.cols());
                let mut df = Tensor::zeros(c.rows(), c.cols());
                let mut dh = Tensor::zeros(c.rows(), c.cols());
                for k in 0..c.len() {
                    let (gk, ck) = (g.data()[k], c.data()[k]);
                    dc.data_mut()[k] = gk * (f.data()[k] - h.data()[k]);
                    df.data_mut()[k] = gk * ck;
                    dh.data_mut()[k] = gk * (1.0 - ck);
                }
                acc(grads, *gate, dc);
                acc(grads, *cand, df);
                acc(grads, *carry, dh);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                    }
                    off += cols;
                    acc(grads, p, d);
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.shape(*x);
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(grads, *x, d);
            }
            Op::Gather { table, ids } => {
                let (rows, cols) = self.shape(*table);
                let mut d = Tensor::zeros(rows, cols);
                for (i, &id) in ids.iter().enumerate() {
                    for (o, x) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(grads, *table, d);
            }
            Op::Blend { a, b, mask } => {
                let mut da = g.clone();
                let mut db = g;
                for (r, &m) in mask.iter().enumerate() {
                    for x in da.row_mut(r) {
                        *x *= m;
                    }
                    for x in db.row_mut(r) {
                        *x *= 1.0 - m;
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::MaskedMax { xs, argmax } => {
                let (rows, cols) = (g.rows(), g.cols());
                let mut ds: Vec<Option<Tensor>> = vec![None; xs.len()];
                for (k, &t) in argmax.iter().enumerate() {
                    let d = ds[t].get_or_insert_with(|| Tensor::zeros(rows, cols));
                    d.data_mut()[k] += g.data()[k];
                }
                for (t, d) in ds.into_iter().enumerate() {
                    if let Some(d) = d {
                        acc(grads, xs[t], d);
                    }
                }
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.shape(*a);
                acc(grads, *a, Tensor::filled(rows, cols, g.item()));
            }
            Op::SumCols(a) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let gr = g.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|x| *x = gr);
                }
                acc(grads, *a, d);
            }
            Op::Mean(xs) => {
                let share = g.scale(1.0 / xs.len() as f64);
                for &x in xs {
                    acc(grads, x, share.clone());
                }
            }
            Op::Softmax(a) => {
                // dX = P ⊙ (G - rowsum(G ⊙ P))
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (p, gr) = (y.row(r), g.row(r));
                    let dot: f64 = p.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for ((o, p), g) in d.row_mut(r).iter_mut().zip(p).zip(gr) {
                        *o = p * (g - dot);
                    }
                }
                acc(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                // dX = G - softmax ⊙ rowsum(G)
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for ((o, ls), g) in d.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = g - ls.exp() * gsum;
                    }
                }
                acc(grads, *a, d);
            }
            Op::Pick { x, idx } => {
                let (rows, cols) = self.shape(*x);
                let mut d = Tensor::zeros(rows, cols);
                for (r, &c) in idx.iter().enumerate() {
                    d.set(r, c, g.get(r, 0));
                }
                acc(grads, *x, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let total: f64 = weights.iter().sum();
                let mut d = Tensor::zeros(probs.rows(), probs.cols());
                if total > 0.0 {
                    let gs = g.item() / total;
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for (o, p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o = gs * w * p;
                        }
                        d.row_mut(r)[t] -= gs * w;
                    }
                }
                acc(grads, *logits, d);
            }
            Op::WeightedSum { alpha, states } => {
                let a = self.value(*alpha);
                let mut dalpha = Tensor::zeros(a.rows(), a.cols());
                for (i, &s) in states.iter().enumerate() {
                    let sv = self.value(s);
                    let mut ds = Tensor::zeros(sv.rows(), sv.cols());
                    for r in 0..sv.rows() {
                        let w = a.get(r, i);
                        let gr = g.row(r);
                        let mut dot = 0.0;
                        for ((o, x), gv) in ds.row_mut(r).iter_mut().zip(sv.row(r)).zip(gr) {
                            *o = w * gv;
                            dot += gv * x;
                        }
                        dalpha.set(r, i, dot);
                    }
                    acc(grads, s, ds);
                }
                acc(grads, *alpha, dalpha);
            }
            Op::MulConst { x, k } => acc(grads, *x, g.zip_map(k, |g, k| g * k)),
            Op::Transpose(x) => acc(grads, *x, g.transpose()),
            Op::RowNormSum(x) => {
                let v = self.value(*x);
                let gs = g.item();
                let mut d = Tensor::zeros(v.rows(), v.cols());
                for r in 0..v.rows() {
                    let norm = v.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
                    if norm > ROW_NORM_EPS {
                        for (o, a) in d.row_mut(r).iter_mut().zip(v.row(r)) {
                            *o = gs * a / norm;
                        }
                    }
                }
                acc(grads, *x, d);
            }
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn softmax_rows(v: &Tensor, mask: Option<&[Vec<bool>]>) -> Tensor {
    let mut out = v.clone();
    for r in 0..v.rows() {
        let keep = |c: usize| mask.map_or(true, |m| m[r][c]);
        let row = out.row_mut(r);
        let m = row
            .iter()
            .enumerate()
            .filter(|(c, _)| keep(*c))
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (c, x) in row.iter_mut().enumerate() {
            if keep(c) {
                *x = (*x - m).exp();
                z += *x;
            } else {
                *x = 0.0;
            }
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    out
}
