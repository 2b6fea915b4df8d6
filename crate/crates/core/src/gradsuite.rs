//! Finite-difference suite over every differentiable op used in training.
//! Each op is checked at many random points; the report keeps the worst
//! relative error per op.

use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::{grad_check_store_with_step, grad_check_with, ParamStore, Tape, Var};
use crate::cell::{cell_step, CellDag, Feedback, SharedCellParams};
use crate::models::{attention_context, AttnParams, ModelConfig, PairClassifier, TaskModel};
use crate::regularizers::{block_sparsity, block_sparsity_grad, orthogonality_grad, orthogonality_penalty};
use crate::rng::{seeded, Rng};
use crate::tasks::PairExample;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub points: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn worst(errs: Vec<(crate::autodiff::ParamId, f64)>) -> f64 {
    errs.into_iter().map(|(_, e)| e).fold(0.0, f64::max)
}

/// `Σ r ⊙ v` for a fixed random `r`, so every output entry gets a distinct weight.
fn project(tape: &mut Tape, v: Var, r: &Tensor) -> Var {
    let w = tape.mul_const(v, r.clone());
    tape.sum_all(w)
}

fn cell_point(rng: &mut Rng) -> f64 {
    let n = rng.gen_range(1..=4);
    let (input, hidden, batch) = (3, 4, 2);
    let mut store = ParamStore::new();
    let p = SharedCellParams::register(&mut store, "cell", input, hidden, n, 0.8, rng);
    let x = store.add("x", Tensor::uniform(batch, input, 1.0, rng));
    let h = store.add("h", Tensor::uniform(batch, hidden, 1.0, rng));
    let dag = CellDag::random(n, rng);
    let feedback = if rng.gen_bool(0.5) { Feedback::LooseEndAvg } else { Feedback::LastNode };
    let r = Tensor::uniform(batch, hidden, 1.0, rng);
    let errs = grad_check_store_with_step(
        &mut store,
        |tape, store| {
            let xv = tape.param(store, x);
            let hv = tape.param(store, h);
            let out = cell_step(tape, store, &p, &dag, feedback, xv, hv).expect("valid dag");
            project(tape, out.output, &r)
        },
        STEP,
    );
    worst(errs)
}

fn random_seq(rng: &mut Rng, vocab: usize) -> Vec<usize> {
    let len = rng.gen_range(1..=4);
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

fn pair_point(rng: &mut Rng) -> f64 {
    let cfg = ModelConfig {
        embed_dim: 3,
        hidden: 3,
        num_nodes: rng.gen_range(1..=3),
        dropout: 0.0,
        init_scale: 0.5,
        ..ModelConfig::default()
    };
    let vocab = 5;
    let mut m = PairClassifier::new(&cfg, vocab, 2, rng);
    let dag = CellDag::random(cfg.num_nodes, rng);
    let batch: Vec<PairExample> = (0..2)
        .map(|_| PairExample {
            s1: random_seq(rng, vocab),
            s2: random_seq(rng, vocab),
            label: rng.gen_range(0..2),
        })
        .collect();
    let refs: Vec<&PairExample> = batch.iter().collect();
    let errs = grad_check_with(
        &mut m,
        |m| m.store_mut(),
        |tape, m| m.batch_loss(tape, &dag, &refs, None).expect("valid batch"),
        STEP,
    );
    worst(errs)
}

fn attention_point(rng: &mut Rng) -> f64 {
    let (enc_dim, dec_dim, attn_dim, batch) = (4, 3, 3, 2);
    let len = rng.gen_range(1..=4);
    let mut store = ParamStore::new();
    let attn = AttnParams::register(&mut store, enc_dim, dec_dim, attn_dim, 0.8, rng);
    let b_a = Tensor::uniform(1, attn_dim, 0.5, rng);
    store.set_value(attn.b_a, b_a);
    let s = store.add("s", Tensor::uniform(batch, dec_dim, 1.0, rng));
    let enc: Vec<_> = (0..len)
        .map(|i| store.add(format!("h{i}"), Tensor::uniform(batch, enc_dim, 1.0, rng)))
        .collect();
    let mask: Vec<Vec<bool>> = (0..batch)
        .map(|_| {
            let real = rng.gen_range(1..=len);
            (0..len).map(|i| i < real).collect()
        })
        .collect();
    let ra = Tensor::uniform(batch, len, 1.0, rng);
    let rc = Tensor::uniform(batch, enc_dim, 1.0, rng);
    let errs = grad_check_store_with_step(
        &mut store,
        |tape, store| {
            let sv = tape.param(store, s);
            let hv: Vec<Var> = enc.iter().map(|&id| tape.param(store, id)).collect();
            let (alpha, ctx) = attention_context(tape, store, &attn, sv, &hv, &mask);
            let a = project(tape, alpha, &ra);
            let c = project(tape, ctx, &rc);
            tape.add(a, c)
        },
        STEP,
    );
    worst(errs)
}

/// Rows have norm at least 0.2, away from the kink at zero.
fn rows_away_from_zero(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    loop {
        let m = Tensor::uniform(rows, cols, 1.0, rng);
        let ok = (0..rows).all(|i| m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() >= 0.2);
        if ok {
            return m;
        }
    }
}

/// Central differences of a plain function of one matrix against a closed-form gradient.
fn closed_form_error(f: impl Fn(&Tensor) -> f64, grad: &Tensor, at: &Tensor) -> f64 {
    let mut e: f64 = 0.0;
    for k in 0..at.len() {
        let mut p = at.clone();
        p.data_mut()[k] += STEP;
        let mut q = at.clone();
        q.data_mut()[k] -= STEP;
        let num = (f(&p) - f(&q)) / (2.0 * STEP);
        e = e.max(crate::autodiff::relative_error(grad.data()[k], num));
    }
    e
}

fn sparsity_point(rng: &mut Rng) -> f64 {
    let (rows, cols) = (rng.gen_range(1..=5), rng.gen_range(1..=4));
    let m = rows_away_from_zero(rows, cols, rng);
    let mut store = ParamStore::new();
    let id = store.add("m", m.clone());
    let tape_err = worst(grad_check_store_with_step(
        &mut store,
        |tape, store| {
            let v = tape.param(store, id);
            tape.row_norm_sum(v)
        },
        STEP,
    ));
    tape_err.max(closed_form_error(block_sparsity, &block_sparsity_grad(&m), &m))
}

fn ortho_point(rng: &mut Rng) -> f64 {
    let (rows, cols) = (rng.gen_range(1..=5), rng.gen_range(1..=4));
    let base = Tensor::uniform(rows, cols, 1.0, rng);
    let delta = Tensor::uniform(rows, cols, 1.0, rng);
    let mut store = ParamStore::new();
    let b = store.add("base", base.clone());
    let d = store.add("delta", delta.clone());
    let tape_err = worst(grad_check_store_with_step(
        &mut store,
        |tape, store| {
            let bv = tape.param(store, b);
            let dv = tape.param(store, d);
            let bt = tape.transpose(bv);
            let prod = tape.matmul(bt, dv);
            let sq = tape.mul(prod, prod);
            tape.sum_all(sq)
        },
        STEP,
    ));
    let grad = orthogonality_grad(&base, &delta).expect("same shape");
    let closed = closed_form_error(|x| orthogonality_penalty(&base, x).expect("same shape"), &grad, &delta);
    tape_err.max(closed)
}

/// Names of the checked ops, in report order.
pub const OPS: [&str; 5] = [
    "cell_step",
    "classify_pair",
    "attention_context",
    "block_sparsity",
    "orthogonality_penalty",
];

/// Checks every op at `points` random points drawn from `seed`.
pub fn gradient_suite(points: usize, seed: u64) -> Vec<OpCheck> {
    let checks: [fn(&mut Rng) -> f64; 5] = [cell_point, pair_point, attention_point, sparsity_point, ortho_point];
    OPS.iter()
        .zip(checks)
        .enumerate()
        .map(|(i, (op, check))| {
            let mut rng = seeded(seed.wrapping_add(i as u64));
            let max_rel_error = (0..points).map(|_| check(&mut rng)).fold(0.0, f64::max);
            OpCheck {
                op: op.to_string(),
                points,
                max_rel_error,
            }
        })
        .collect()
}
