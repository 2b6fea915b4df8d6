//! Central finite-difference checks against the tape's analytic gradients.

use crate::tensor::Tensor;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Max relative error between the tape gradient of `f` at `point` and central differences.
/// `f` receives the point as a parameter leaf and must return a `1 x 1` node.
pub fn grad_check(f: impl Fn(&mut Tape, Var) -> Var, point: &Tensor) -> f64 {
    let mut store = ParamStore::new();
    let id = store.add("x", point.clone());
    grad_check_store(&mut store, |tape, store| {
        let x = tape.param(store, id);
        f(tape, x)
    })
    .into_iter()
    .map(|(_, e)| e)
    .fold(0.0, f64::max)
}

/// Checks every entry of every trainable parameter in `store`. Returns the max
/// relative error per parameter. The store is restored before returning.
pub fn grad_check_store(
    store: &mut ParamStore,
    f: impl Fn(&mut Tape, &ParamStore) -> Var,
) -> Vec<(ParamId, f64)> {
    grad_check_store_with_step(store, f, DEFAULT_STEP)
}

pub fn grad_check_store_with_step(
    store: &mut ParamStore,
    f: impl Fn(&mut Tape, &ParamStore) -> Var,
    h: f64,
) -> Vec<(ParamId, f64)> {
    grad_check_with(store, |s| s, f, h)
}

/// Checks a value that owns a [`ParamStore`] (a whole model), reached through `store_of`.
pub fn grad_check_with<M>(
    model: &mut M,
    store_of: impl Fn(&mut M) -> &mut ParamStore,
    f: impl Fn(&mut Tape, &M) -> Var,
    h: f64,
) -> Vec<(ParamId, f64)> {
    let eval = |model: &M| {
        let mut tape = Tape::new();
        let out = f(&mut tape, model);
        tape.scalar(out)
    };
    let grads = {
        let mut tape = Tape::new();
        let out = f(&mut tape, model);
        tape.backward(out).expect("grad_check: backward failed")
    };
    let ids: Vec<ParamId> = store_of(model)
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = grads.get_or_zero(store_of(model), id);
        let mut worst: f64 = 0.0;
        for k in 0..analytic.len() {
            let orig = store_of(model).value(id).data()[k];
            store_of(model).value_mut(id).data_mut()[k] = orig + h;
            let fp = eval(model);
            store_of(model).value_mut(id).data_mut()[k] = orig - h;
            let fm = eval(model);
            store_of(model).value_mut(id).data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
        report.push((id, worst));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn sigmoid_at_zero() {
        let err = grad_check(
            |t, x| {
                let s = t.sigmoid(x);
                t.sum_all(s)
            },
            &Tensor::scalar(0.0),
        );
        assert!(err < 1e-8, "{err}");
    }

    fn smooth_point(rows: usize, cols: usize, seed: u64) -> Tensor {
        // Keep entries away from 0 so abs/relu kinks are not straddled.
        let mut rng = seeded(seed);
        Tensor::uniform(rows, cols, 1.0, &mut rng).map(|x| if x.abs() < 0.1 { x + 0.3 } else { x })
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        type Case = (&'static str, Box<dyn Fn(&mut Tape, Var) -> Var>);
        let cases: Vec<Case> = vec![
            ("matmul", Box::new(|t, x| {
                let w = t.constant(Tensor::from_rows(&[&[0.3, -0.2], &[0.5, 0.1], &[-0.4, 0.7]]));
                let y = t.matmul(x, w);
                let y = t.mul(y, y);
                t.sum_all(y)
            })),
            ("matmul_t", Box::new(|t, x| {
                let y = t.matmul_t(x, x);
                let y = t.tanh(y);
                t.sum_all(y)
            })),
            ("add_row", Box::new(|t, x| {
                let r = t.slice_cols(x, 0, 3);
                let r = t.slice_cols(r, 0, 3);
                let first = t.gather(r, &[0]);
                let y = t.add_row(x, first);
                let y = t.sigmoid(y);
                t.sum_all(y)
            })),
            ("sub_abs", Box::new(|t, x| {
                let y = t.transpose(x);
                let y = t.transpose(y);
                let z = t.scale(x, 0.3);
                let d = t.sub(y, z);
                let d = t.abs(d);
                t.sum_all(d)
            })),
            ("relu_exp", Box::new(|t, x| {
                let y = t.relu(x);
                let y = t.scale(y, 0.5);
                let y = t.exp(y);
                t.sum_all(y)
            })),
            ("highway", Box::new(|t, x| {
                let g = t.sigmoid(x);
                let f = t.tanh(x);
                let h = t.mul(x, x);
                let y = t.highway(g, f, h);
                t.sum_all(y)
            })),
            ("concat_blend", Box::new(|t, x| {
                let a = t.tanh(x);
                let c = t.concat_cols(&[a, x]);
                let c = t.slice_cols(c, 1, 3);
                let y = t.blend(c, x, &[1.0, 0.0, 1.0, 0.0]);
                let y = t.mul(y, c);
                t.sum_all(y)
            })),
            ("masked_max", Box::new(|t, x| {
                let a = t.scale(x, 2.0);
                let b = t.tanh(x);
                let valid = vec![vec![true, true, false, true], vec![true, false, true, true]];
                let m = t.masked_max(&[a, b], &valid);
                let m = t.mul(m, m);
                t.sum_all(m)
            })),
            ("softmax_pick", Box::new(|t, x| {
                let p = t.softmax(x);
                let w = t.constant(Tensor::from_rows(&[&[1.0], &[-2.0], &[0.5]]));
                let y = t.matmul(p, w);
                let l = t.log_softmax(x);
                let k = t.pick(l, &[0, 2, 1, 0]);
                let s = t.sum_cols(k);
                let y = t.add(y, s);
                t.sum_all(y)
            })),
            ("masked_softmax", Box::new(|t, x| {
                let mask = vec![
                    vec![true, false, true],
                    vec![true, true, true],
                    vec![false, true, false],
                    vec![true, true, false],
                ];
                let p = t.masked_softmax(x, &mask);
                let p = t.mul(p, x);
                t.sum_all(p)
            })),
            ("cross_entropy", Box::new(|t, x| {
                t.cross_entropy(x, &[0, 2, 1, 1], &[1.0, 0.5, 0.0, 2.0])
            })),
            ("weighted_sum_mean", Box::new(|t, x| {
                let a = t.softmax(x);
                let alpha = t.slice_cols(a, 0, 2);
                let s1 = t.tanh(x);
                let s2 = t.mul(x, x);
                let c = t.weighted_sum(alpha, &[s1, s2]);
                let m = t.mean(&[c, s1, x]);
                let m = t.mul_const(m, Tensor::filled(4, 3, 2.0));
                t.sum_all(m)
            })),
            ("row_norm_sum", Box::new(|t, x| t.row_norm_sum(x))),
        ];
        for (name, f) in &cases {
            for seed in 0..20 {
                let p = smooth_point(4, 3, seed);
                let err = grad_check(f, &p);
                assert!(err < 1e-6, "{name}: relative error {err} at seed {seed}");
            }
        }
    }
}
