use rand::Rng as _;

use super::Metric;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A model prediction or gold answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Output {
    Label(usize),
    Tokens(Vec<usize>),
}

/// Score of one prediction in `[0, 1]`.
///
/// Token accuracy counts position-wise matches over the shorter sequence and
/// divides by the longer length, so missing and extra tokens count as wrong.
pub fn score(metric: Metric, pred: &Output, gold: &Output) -> Result<f64> {
    match (metric, pred, gold) {
        (Metric::Accuracy, Output::Label(p), Output::Label(g)) => Ok(f64::from(u8::from(p == g))),
        (Metric::ExactMatch, Output::Tokens(p), Output::Tokens(g)) => Ok(f64::from(u8::from(p == g))),
        (Metric::TokenAccuracy, Output::Tokens(p), Output::Tokens(g)) => {
            let denom = p.len().max(g.len());
            if denom == 0 {
                return Ok(1.0);
            }
            let hits = p.iter().zip(g).filter(|(a, b)| a == b).count();
            Ok(hits as f64 / denom as f64)
        }
        _ => Err(Error::contract(format!("metric {metric:?} does not apply to this output kind"))),
    }
}

pub fn mean_score(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean of [`score`] over paired predictions and gold answers.
pub fn evaluate(preds: &[Output], golds: &[Output], metric: Metric) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} gold answers",
            preds.len(),
            golds.len()
        )));
    }
    let scores = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| score(metric, p, g))
        .collect::<Result<Vec<_>>>()?;
    mean_score(&scores)
}

/// One-sided paired bootstrap for "system A is better than B".
///
/// Resamples example indices with replacement `iterations` times and returns the
/// fraction of resamples where `mean(a) < mean(b)`, with exact ties counted as
/// one half. Identical inputs therefore give exactly 0.5.
pub fn bootstrap_test(a: &[f64], b: &[f64], iterations: usize, rng: &mut Rng) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "score vectors differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::contract("bootstrap over no examples"));
    }
    if iterations < 1000 {
        return Err(Error::contract(format!("need at least 1000 iterations, got {iterations}")));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diff.len();
    let scale = diff.iter().map(|d| d.abs()).fold(0.0, f64::max) * n as f64;
    let tol = 1e-12 * scale.max(1.0);
    let mut worse = 0.0;
    for _ in 0..iterations {
        let total: f64 = (0..n).map(|_| diff[rng.gen_range(0..n)]).sum();
        if total < -tol {
            worse += 1.0;
        } else if total <= tol {
            worse += 0.5;
        }
    }
    Ok(worse / iterations as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn scores() {
        let t = |v: &[usize]| Output::Tokens(v.to_vec());
        assert_eq!(score(Metric::TokenAccuracy, &t(&[0, 1]), &t(&[0, 1, 2])).unwrap(), 2.0 / 3.0);
        assert_eq!(score(Metric::TokenAccuracy, &t(&[0, 1, 2, 3]), &t(&[0, 1])).unwrap(), 0.5);
        assert_eq!(score(Metric::TokenAccuracy, &t(&[]), &t(&[])).unwrap(), 1.0);
        assert_eq!(score(Metric::ExactMatch, &t(&[0, 1]), &t(&[0, 1])).unwrap(), 1.0);
        assert_eq!(score(Metric::ExactMatch, &t(&[0]), &t(&[0, 1])).unwrap(), 0.0);
        assert_eq!(score(Metric::Accuracy, &Output::Label(1), &Output::Label(1)).unwrap(), 1.0);
        assert!(score(Metric::Accuracy, &t(&[0]), &t(&[0])).is_err());
        assert!(evaluate(&[], &[], Metric::Accuracy).is_err());
        let golds: Vec<Output> = (0..10).map(|i| Output::Label(i % 2)).collect();
        assert_eq!(evaluate(&golds, &golds, Metric::Accuracy).unwrap(), 1.0);
        let constant = vec![Output::Label(1); 10];
        assert_eq!(evaluate(&constant, &golds, Metric::Accuracy).unwrap(), 0.5);
    }

    /// Exact bootstrap p-value by enumerating all `n^n` resamples.
    fn exact_p(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let total = n.pow(n as u32);
        let mut worse = 0.0;
        for code in 0..total {
            let mut c = code;
            let mut s = 0.0;
            for _ in 0..n {
                s += diff[c % n];
                c /= n;
            }
            if s < -1e-9 {
                worse += 1.0;
            } else if s.abs() <= 1e-9 {
                worse += 0.5;
            }
        }
        worse / total as f64
    }

    #[test]
    fn bootstrap_examples() {
        let mut rng = seeded(0);
        let a = vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let p = bootstrap_test(&a, &a, 10_000, &mut rng).unwrap();
        assert_eq!(p, 0.5);
        assert_eq!(bootstrap_test(&[1.0; 7], &[0.0; 7], 1000, &mut rng).unwrap(), 0.0);
        assert_eq!(bootstrap_test(&[1.0], &[0.0], 1000, &mut rng).unwrap(), 0.0);
        assert!(bootstrap_test(&[1.0], &[0.0, 1.0], 1000, &mut rng).is_err());
        assert!(bootstrap_test(&[1.0], &[0.0], 999, &mut rng).is_err());

        let a = [1.0, 0.0, 1.0, 1.0, 0.0];
        let b = [0.0, 1.0, 1.0, 0.0, 0.0];
        let p = bootstrap_test(&a, &b, 100_000, &mut rng).unwrap();
        let want = exact_p(&a, &b);
        assert!((p - want).abs() < 0.01, "{p} vs exact {want}");

        // 100 examples, A right on 80, B on 70, overlapping on 70.
        let a: Vec<f64> = (0..100).map(|i| f64::from(u8::from(i < 80))).collect();
        let b: Vec<f64> = (0..100).map(|i| f64::from(u8::from(i < 70))).collect();
        let p = bootstrap_test(&a, &b, 100_000, &mut rng).unwrap();
        assert!(p < 0.05, "{p}");
    }
}
