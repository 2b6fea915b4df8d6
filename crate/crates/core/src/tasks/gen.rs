use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{PairExample, Rule, SeqExample, TaskData, TaskDataset, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

/// Rejection-sampling budget per example before giving up on a spec.
const MAX_TRIES: usize = 100_000;

fn random_seq(spec: &TaskSpec, rng: &mut Rng) -> Vec<usize> {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    (0..len)
        .map(|_| spec.vocab_offset + rng.gen_range(0..spec.vocab_size))
        .collect()
}

fn majority(s: &[usize]) -> usize {
    let mut counts = BTreeMap::new();
    for &x in s {
        *counts.entry(x).or_insert(0usize) += 1;
    }
    // max_by_key keeps the last maximum; iterate in reverse so ties pick the smallest symbol.
    counts
        .into_iter()
        .rev()
        .max_by_key(|&(_, c)| c)
        .map(|(x, _)| x)
        .expect("non-empty sequence")
}

/// Label of a pair under `rule`. `target` is the symbol counted by the parity rule.
pub fn pair_label(rule: Rule, target: usize, s1: &[usize], s2: &[usize]) -> Result<usize> {
    let yes = match rule {
        Rule::SameMajoritySymbol => majority(s1) == majority(s2),
        Rule::ParityOfTargetCount => {
            let c1 = s1.iter().filter(|&&x| x == target).count();
            let c2 = s2.iter().filter(|&&x| x == target).count();
            c1 % 2 == c2 % 2
        }
        Rule::SharedSymbol => {
            let a: HashSet<_> = s1.iter().collect();
            s2.iter().any(|x| a.contains(x))
        }
        Rule::SameFirstSymbol => s1[0] == s2[0],
        other => return Err(Error::contract(format!("`{other}` is not a pair rule"))),
    };
    Ok(usize::from(yes))
}

/// The cipher permutation over `0..vocab_size` for `key`.
pub fn cipher_table(key: u64, vocab_size: usize) -> Vec<usize> {
    let mut table: Vec<usize> = (0..vocab_size).collect();
    table.shuffle(&mut stream(key, "cipher"));
    table
}

/// Target sequence for `src` under a sequence rule.
pub fn apply_seq_rule(rule: Rule, spec: &TaskSpec, src: &[usize]) -> Result<Vec<usize>> {
    Ok(match rule {
        Rule::Copy => src.to_vec(),
        Rule::Reverse => src.iter().rev().copied().collect(),
        Rule::SubstitutionCipher(key) => {
            let table = cipher_table(key, spec.vocab_size);
            src.iter()
                .map(|&x| spec.vocab_offset + table[x - spec.vocab_offset])
                .collect()
        }
        other => return Err(Error::contract(format!("`{other}` is not a sequence rule"))),
    })
}

/// Draws the three splits in order (train, val, test), each from its own
/// stream, rejecting anything already drawn in any split.
fn gen_splits<E: Clone + Eq + std::hash::Hash>(
    spec: &TaskSpec,
    seed: u64,
    mut draw: impl FnMut(&mut Rng, usize) -> Result<E>,
) -> Result<[Vec<E>; 3]> {
    let mut seen = HashSet::new();
    let mut out: [Vec<E>; 3] = Default::default();
    for (k, (label, n)) in [("train", spec.train), ("val", spec.val), ("test", spec.test)]
        .into_iter()
        .enumerate()
    {
        let mut rng = stream(seed, &format!("task:{}:{label}", spec.name));
        let mut tries = 0;
        while out[k].len() < n {
            let i = out[k].len();
            let e = draw(&mut rng, i)?;
            if seen.insert(e.clone()) {
                out[k].push(e);
                tries = 0;
            } else {
                tries += 1;
                if tries > MAX_TRIES {
                    return Err(Error::contract(format!(
                        "task `{}` cannot produce {n} distinct {label} examples",
                        spec.name
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// Pair-classification dataset with labels alternating 1, 0, 1, ... by rejection,
/// so every split is balanced to within one example.
pub fn gen_pair_task(spec: &TaskSpec, seed: u64) -> Result<TaskDataset<PairExample>> {
    spec.validate().map_err(|e| Error::contract(e.to_string()))?;
    if !spec.rule.is_pair() {
        return Err(Error::contract(format!("`{}` is not a pair rule", spec.rule)));
    }
    let target = spec.vocab_offset;
    let [train, val, test] = gen_splits(spec, seed, |rng, i| {
        let want = 1 - i % 2;
        for _ in 0..MAX_TRIES {
            let s1 = random_seq(spec, rng);
            let s2 = random_seq(spec, rng);
            let label = pair_label(spec.rule, target, &s1, &s2)?;
            if label == want {
                return Ok(PairExample { s1, s2, label });
            }
        }
        Err(Error::contract(format!(
            "task `{}` almost never produces label {want}",
            spec.name
        )))
    })?;
    Ok(TaskDataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

pub fn gen_seq2seq_task(spec: &TaskSpec, seed: u64) -> Result<TaskDataset<SeqExample>> {
    spec.validate().map_err(|e| Error::contract(e.to_string()))?;
    if spec.rule.is_pair() {
        return Err(Error::contract(format!("`{}` is not a sequence rule", spec.rule)));
    }
    let [train, val, test] = gen_splits(spec, seed, |rng, _| {
        let src = random_seq(spec, rng);
        let tgt = apply_seq_rule(spec.rule, spec, &src)?;
        Ok(SeqExample { src, tgt })
    })?;
    Ok(TaskDataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

pub fn gen_task(spec: &TaskSpec, seed: u64) -> Result<TaskData> {
    Ok(if spec.rule.is_pair() {
        TaskData::Pair(gen_pair_task(spec, seed)?)
    } else {
        TaskData::Seq(gen_seq2seq_task(spec, seed)?)
    })
}
