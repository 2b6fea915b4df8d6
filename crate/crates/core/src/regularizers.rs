//! Group-sparsity and orthogonality penalties for continual training.
//!
//! Every penalized weight is viewed as an `m x n` matrix whose rows are the
//! groups. With the default orientation the rows are output units, which is
//! also how weights are stored.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var, ROW_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupOrientation {
    /// Groups are rows of the stored `out x in` matrix.
    #[default]
    Output,
    /// Groups are input columns (the stored matrix is transposed first).
    Input,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub lambda_sparsity: f64,
    pub lambda_ortho: f64,
    /// Glob patterns (`*` wildcard) selecting the penalized parameters.
    pub patterns: Vec<String>,
    pub orientation: GroupOrientation,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            lambda_sparsity: 0.001,
            lambda_ortho: 0.001,
            patterns: vec!["*cell.*".into()],
            orientation: GroupOrientation::Output,
        }
    }
}

impl RegConfig {
    pub fn off() -> Self {
        Self {
            lambda_sparsity: 0.0,
            lambda_ortho: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lambda_sparsity", self.lambda_sparsity),
            ("lambda_ortho", self.lambda_ortho),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn orient(&self, m: &Tensor) -> Tensor {
        match self.orientation {
            GroupOrientation::Output => m.clone(),
            GroupOrientation::Input => m.transpose(),
        }
    }
}

/// `Σ_i ‖M[i, :]‖₂`.
pub fn block_sparsity(m: &Tensor) -> f64 {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum()
}

/// Row `i` is `M[i, :] / ‖M[i, :]‖₂`, or zero when the norm is at most [`ROW_NORM_EPS`].
pub fn block_sparsity_grad(m: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let norm = m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > ROW_NORM_EPS {
            for (o, x) in g.row_mut(r).iter_mut().zip(m.row(r)) {
                *o = x / norm;
            }
        }
    }
    g
}

fn same_shape(base: &Tensor, delta: &Tensor) -> Result<()> {
    if base.shape() != delta.shape() {
        return Err(Error::contract(format!(
            "base {:?} and delta {:?} differ in shape",
            base.shape(),
            delta.shape()
        )));
    }
    Ok(())
}

/// `‖baseᵀ · delta‖²_F`.
pub fn orthogonality_penalty(base: &Tensor, delta: &Tensor) -> Result<f64> {
    same_shape(base, delta)?;
    Ok(base.transpose().matmul(delta).frobenius_sq())
}

/// Gradient of [`orthogonality_penalty`] with respect to `delta`: `2 · base · (baseᵀ · delta)`.
pub fn orthogonality_grad(base: &Tensor, delta: &Tensor) -> Result<Tensor> {
    same_shape(base, delta)?;
    Ok(base.matmul(&base.transpose().matmul(delta)).scale(2.0))
}

/// Unweighted penalty sums, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegTerms {
    pub sparsity: f64,
    pub ortho: f64,
}

impl RegTerms {
    pub fn weighted(&self, cfg: &RegConfig) -> f64 {
        cfg.lambda_sparsity * self.sparsity + cfg.lambda_ortho * self.ortho
    }
}

/// Penalty over named matrices. Without `frozen` (the first step) only the
/// sparsity term on `params` applies. With `frozen`, `params` are the deltas
/// and both terms apply; the two maps must agree on names and shapes.
pub fn cas_regularizer(
    frozen: Option<&BTreeMap<String, Tensor>>,
    params: &BTreeMap<String, Tensor>,
    cfg: &RegConfig,
) -> Result<RegTerms> {
    let mut terms = RegTerms::default();
    if let Some(frozen) = frozen {
        if frozen.len() != params.len() || frozen.keys().any(|k| !params.contains_key(k)) {
            return Err(Error::contract("frozen and delta maps have different keys"));
        }
    }
    for (name, m) in params {
        let d = cfg.orient(m);
        terms.sparsity += block_sparsity(&d);
        if let Some(frozen) = frozen {
            let b = cfg.orient(&frozen[name]);
            terms.ortho += orthogonality_penalty(&b, &d)?;
        }
    }
    Ok(terms)
}

/// The same penalty on a tape, over the parameters of `store` matching the
/// config patterns. Parameters without a frozen base get the sparsity term on
/// their value; parameters with one get sparsity on the delta plus
/// orthogonality between base and delta. Returns the weighted loss term (or
/// `None` when nothing is penalized) and the unweighted sums.
pub fn cas_regularizer_tape(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &RegConfig,
) -> (Option<Var>, RegTerms) {
    let mut terms = RegTerms::default();
    if cfg.lambda_sparsity == 0.0 && cfg.lambda_ortho == 0.0 {
        return (None, terms);
    }
    let mut acc: Option<Var> = None;
    let push = |tape: &mut Tape, v: Var, acc: &mut Option<Var>| {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, v),
            None => v,
        });
    };
    for id in store.matching(&cfg.patterns) {
        let p = store.get(id);
        if !p.trainable {
            continue;
        }
        let mut d = tape.delta(store, id);
        if cfg.orientation == GroupOrientation::Input {
            d = tape.transpose(d);
        }
        if cfg.lambda_sparsity != 0.0 {
            let s = tape.row_norm_sum(d);
            terms.sparsity += tape.scalar(s);
            let s = tape.scale(s, cfg.lambda_sparsity);
            push(tape, s, &mut acc);
        }
        if let (Some(base), true) = (&p.base, cfg.lambda_ortho != 0.0) {
            let b = cfg.orient(base);
            let bt = tape.constant(b.transpose());
            let prod = tape.matmul(bt, d);
            let sq = tape.mul(prod, prod);
            let o = tape.sum_all(sq);
            terms.ortho += tape.scalar(o);
            let o = tape.scale(o, cfg.lambda_ortho);
            push(tape, o, &mut acc);
        }
    }
    (acc, terms)
}
