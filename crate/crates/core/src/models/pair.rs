use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::cell::CellDag;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tasks::{Metric, PairExample};
use crate::tensor::Tensor;

use super::{argmax_rows, dropout, BiEncoder, ModelConfig, SeqBatch, TaskModel};

/// Siamese bidirectional encoder with max pooling and a linear classifier on
/// `[u; v; |u − v|; u ⊙ v]`.
#[derive(Clone, Debug)]
pub struct PairClassifier {
    pub config: ModelConfig,
    pub vocab: usize,
    pub classes: usize,
    store: ParamStore,
    pub embed: ParamId,
    pub encoder: BiEncoder,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl PairClassifier {
    pub fn new(config: &ModelConfig, vocab: usize, classes: usize, rng: &mut Rng) -> Self {
        let s = config.init_scale;
        let mut store = ParamStore::new();
        let embed = store.add("embed", Tensor::uniform(vocab, config.embed_dim, s, rng));
        let encoder = BiEncoder::register(&mut store, "enc", config.embed_dim, config.hidden, config.num_nodes, s, rng);
        let feat = 8 * config.hidden;
        let head_w = store.add("head.w", Tensor::uniform(classes, feat, s, rng));
        let head_b = store.add("head.b", Tensor::zeros(1, classes));
        Self {
            config: config.clone(),
            vocab,
            classes,
            store,
            embed,
            encoder,
            head_w,
            head_b,
        }
    }

    /// Max-pooled bidirectional encoding of each sequence, `B x 2·hidden`.
    pub fn encode_pool(
        &self,
        tape: &mut Tape,
        dag: &CellDag,
        seqs: &[&[usize]],
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let batch = SeqBatch::new(seqs, self.vocab)?;
        let xs = batch.embed(tape, &self.store, self.embed, self.config.dropout, rng);
        self.encoder
            .encode_pool(tape, &self.store, dag, self.config.feedback, &xs, &batch)
    }

    /// The joint feature `[u; v; |u − v|; u ⊙ v]` for each pair.
    pub fn features(
        &self,
        tape: &mut Tape,
        dag: &CellDag,
        s1: &[&[usize]],
        s2: &[&[usize]],
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let u = self.encode_pool(tape, dag, s1, rng.as_deref_mut())?;
        let v = self.encode_pool(tape, dag, s2, rng.as_deref_mut())?;
        let d = tape.sub(u, v);
        let a = tape.abs(d);
        let m = tape.mul(u, v);
        Ok(tape.concat_cols(&[u, v, a, m]))
    }

    pub fn logits(
        &self,
        tape: &mut Tape,
        dag: &CellDag,
        batch: &[&PairExample],
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let s1: Vec<&[usize]> = batch.iter().map(|e| e.s1.as_slice()).collect();
        let s2: Vec<&[usize]> = batch.iter().map(|e| e.s2.as_slice()).collect();
        let h = self.features(tape, dag, &s1, &s2, rng.as_deref_mut())?;
        let h = dropout(tape, h, self.config.dropout, rng);
        let w = tape.param(&self.store, self.head_w);
        let b = tape.param(&self.store, self.head_b);
        let z = tape.matmul_t(h, w);
        Ok(tape.add_row(z, b))
    }

    /// Class distribution for one pair.
    pub fn classify_pair(&self, dag: &CellDag, s1: &[usize], s2: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let e = PairExample {
            s1: s1.to_vec(),
            s2: s2.to_vec(),
            label: 0,
        };
        let z = self.logits(&mut tape, dag, &[&e], None)?;
        let p = tape.softmax(z);
        Ok(tape.value(p).data().to_vec())
    }

    pub fn predict(&self, dag: &CellDag, batch: &[&PairExample]) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let z = self.logits(&mut tape, dag, batch, None)?;
        Ok(argmax_rows(tape.value(z)))
    }
}

impl TaskModel for PairClassifier {
    type Example = PairExample;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn num_nodes(&self) -> usize {
        self.config.num_nodes
    }

    fn head_ids(&self) -> Vec<ParamId> {
        vec![self.head_w, self.head_b]
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        dag: &CellDag,
        batch: &[&PairExample],
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        if let Some(e) = batch.iter().find(|e| e.label >= self.classes) {
            return Err(Error::contract(format!("label {} outside {} classes", e.label, self.classes)));
        }
        let z = self.logits(tape, dag, batch, rng)?;
        let targets: Vec<usize> = batch.iter().map(|e| e.label).collect();
        Ok(tape.cross_entropy(z, &targets, &vec![1.0; batch.len()]))
    }

    fn example_scores(&self, dag: &CellDag, batch: &[&PairExample], metric: Metric) -> Result<Vec<f64>> {
        if metric != Metric::Accuracy {
            return Err(Error::contract(format!("pair tasks are scored by accuracy, not {metric:?}")));
        }
        let pred = self.predict(dag, batch)?;
        Ok(pred
            .iter()
            .zip(batch)
            .map(|(&p, e)| if p == e.label { 1.0 } else { 0.0 })
            .collect())
    }

    fn reward_metric(&self) -> Metric {
        Metric::Accuracy
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_with, AdamConfig, AdamState};
    use crate::cell::{Activation, Feedback};
    use crate::rng::seeded;

    fn small() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            hidden: 3,
            num_nodes: 3,
            dropout: 0.0,
            init_scale: 0.5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn pooling_examples() {
        let m = PairClassifier::new(&small(), 6, 2, &mut seeded(0));
        let dag = CellDag::random(3, &mut seeded(1));
        let mut tape = Tape::new();
        let pooled = m.encode_pool(&mut tape, &dag, &[&[4]], None).unwrap();
        let batch = SeqBatch::new(&[&[4]], 6).unwrap();
        let xs = batch.embed(&mut tape, m.store(), m.embed, 0.0, None);
        let states = m.encoder.encode(&mut tape, m.store(), &dag, Feedback::LooseEndAvg, &xs, &batch).unwrap();
        assert_eq!(tape.value(pooled), tape.value(states[0]));

        let a = tape.constant(Tensor::row_vector(&[1.0, 0.0]));
        let b = tape.constant(Tensor::row_vector(&[0.0, 1.0]));
        let mx = tape.masked_max(&[a, b], &[vec![true], vec![true]]);
        assert_eq!(tape.value(mx), &Tensor::row_vector(&[1.0, 1.0]));

        let seqs: [&[usize]; 2] = [&[1, 2, 3, 5], &[2, 0]];
        let pooled = m.encode_pool(&mut tape, &dag, &seqs, None).unwrap();
        let batch = SeqBatch::new(&seqs, 6).unwrap();
        let xs = batch.embed(&mut tape, m.store(), m.embed, 0.0, None);
        let states = m.encoder.encode(&mut tape, m.store(), &dag, Feedback::LooseEndAvg, &xs, &batch).unwrap();
        for (b, s) in seqs.iter().enumerate() {
            for c in 0..6 {
                let want = (0..s.len())
                    .map(|t| tape.value(states[t]).get(b, c))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(tape.value(pooled).get(b, c), want);
            }
        }
        assert!(m.encode_pool(&mut tape, &dag, &[&[]], None).is_err());
        assert!(m.encode_pool(&mut tape, &dag, &[&[6]], None).is_err());
    }

    #[test]
    fn backward_direction_matches_a_reversed_forward_pass() {
        // Give both directions the same weights: the backward states must then be
        // the forward states of the reversed sequence.
        let mut m = PairClassifier::new(&small(), 6, 2, &mut seeded(2));
        for (f, b) in m.encoder.fwd.all_ids().into_iter().zip(m.encoder.bwd.all_ids()) {
            let v = m.store.value(f).clone();
            m.store.set_value(b, v);
        }
        let dag = CellDag::random(3, &mut seeded(3));
        let seq = [1usize, 4, 2, 2];
        let rev: Vec<usize> = seq.iter().rev().copied().collect();
        let mut tape = Tape::new();
        let run = |tape: &mut Tape, s: &[usize]| {
            let batch = SeqBatch::new(&[s], 6).unwrap();
            let xs = batch.embed(tape, m.store(), m.embed, 0.0, None);
            m.encoder.encode(tape, m.store(), &dag, Feedback::LooseEndAvg, &xs, &batch).unwrap()
        };
        let a = run(&mut tape, &seq);
        let b = run(&mut tape, &rev);
        for t in 0..4 {
            let fwd_rev = &tape.value(b[3 - t]).data()[..3];
            let bwd = &tape.value(a[t]).data()[3..];
            assert_eq!(fwd_rev, bwd);
        }
    }

    #[test]
    fn classify_pair_properties() {
        let m = PairClassifier::new(&small(), 6, 2, &mut seeded(4));
        let mut rng = seeded(5);
        for _ in 0..10 {
            let dag = CellDag::random(3, &mut rng);
            let p = m.classify_pair(&dag, &[1, 2, 3], &[3, 4]).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&x| x > 0.0));

            let mut tape = Tape::new();
            let s1: &[usize] = &[1, 5, 2];
            let s2: &[usize] = &[0, 4];
            let same = m.features(&mut tape, &dag, &[s1], &[s1], None).unwrap();
            assert!(tape.value(same).data()[12..18].iter().all(|&x| x == 0.0));
            let ab = m.features(&mut tape, &dag, &[s1], &[s2], None).unwrap();
            let ba = m.features(&mut tape, &dag, &[s2], &[s1], None).unwrap();
            let (ab, ba) = (tape.value(ab).data(), tape.value(ba).data());
            assert_eq!(&ab[..6], &ba[6..12]);
            assert_eq!(&ab[6..12], &ba[..6]);
            assert_eq!(&ab[12..], &ba[12..]);
        }
    }

    /// Straight-line forward for a single pair under a chain DAG with identity
    /// activations, computed without the tape.
    #[test]
    fn classify_pair_matches_a_hand_rolled_forward() {
        let cfg = ModelConfig {
            num_nodes: 2,
            ..small()
        };
        let m = PairClassifier::new(&cfg, 5, 2, &mut seeded(6));
        let dag = CellDag::new(vec![Activation::Tanh, Activation::Identity], vec![0]).unwrap();
        let w = |name: &str| m.store().value(m.store().id(name).unwrap()).clone();
        let mv = |w: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..w.rows()).map(|r| (0..w.cols()).map(|c| w.get(r, c) * v[c]).sum()).collect()
        };
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let step = |dir: &str, x: &[f64], h: &[f64]| -> Vec<f64> {
            let p = |s: &str| w(&format!("enc.{dir}.cell.{s}"));
            let (a, b, e, f) = (mv(&p("x_c"), x), mv(&p("h_c0"), h), mv(&p("x_h"), x), mv(&p("h_h1"), h));
            let h1: Vec<f64> = (0..3)
                .map(|k| {
                    let c = sig(a[k] + b[k]);
                    c * (e[k] + f[k]).tanh() + (1.0 - c) * h[k]
                })
                .collect();
            let (gc, gh) = (mv(&p("edge.2.1.c"), &h1), mv(&p("edge.2.1.h"), &h1));
            (0..3)
                .map(|k| {
                    let c = sig(gc[k]);
                    c * gh[k] + (1.0 - c) * h1[k]
                })
                .collect()
        };
        let pool = |s: &[usize]| -> Vec<f64> {
            let emb = w("embed");
            let xs: Vec<Vec<f64>> = s.iter().map(|&t| emb.row(t).to_vec()).collect();
            let mut fwd = vec![vec![0.0; 3]];
            for x in &xs {
                let h = step("fwd", x, fwd.last().unwrap());
                fwd.push(h);
            }
            let mut bwd = vec![vec![0.0; 3]];
            for x in xs.iter().rev() {
                let h = step("bwd", x, bwd.last().unwrap());
                bwd.push(h);
            }
            let n = s.len();
            let mut out = vec![f64::NEG_INFINITY; 6];
            for t in 0..n {
                for k in 0..3 {
                    out[k] = out[k].max(fwd[t + 1][k]);
                    out[3 + k] = out[3 + k].max(bwd[n - t][k]);
                }
            }
            out
        };
        let (s1, s2) = ([1usize, 3, 4], [2usize, 2]);
        let (u, v) = (pool(&s1), pool(&s2));
        let mut h = u.clone();
        h.extend(&v);
        h.extend(u.iter().zip(&v).map(|(a, b)| (a - b).abs()));
        h.extend(u.iter().zip(&v).map(|(a, b)| a * b));
        let z: Vec<f64> = mv(&w("head.w"), &h).iter().zip(w("head.b").data()).map(|(a, b)| a + b).collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ez: Vec<f64> = z.iter().map(|x| (x - zmax).exp()).collect();
        let want: Vec<f64> = ez.iter().map(|x| x / ez.iter().sum::<f64>()).collect();
        let got = m.classify_pair(&dag, &s1, &s2).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn end_to_end_gradient_check() {
        let mut m = PairClassifier::new(&small(), 6, 2, &mut seeded(7));
        let dag = CellDag::new(vec![Activation::Tanh, Activation::Sigmoid, Activation::Tanh], vec![0, 0]).unwrap();
        let batch = vec![
            PairExample { s1: vec![1, 2, 3], s2: vec![3, 4], label: 1 },
            PairExample { s1: vec![5], s2: vec![0, 1, 2, 2], label: 0 },
        ];
        let refs: Vec<&PairExample> = batch.iter().collect();
        let errs = grad_check_with(
            &mut m,
            |m| m.store_mut(),
            |tape, m| m.batch_loss(tape, &dag, &refs, None).unwrap(),
            1e-6,
        );
        for (id, e) in errs {
            assert!(e < 1e-4, "{}: {e}", m.store().get(id).name);
        }
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let mut m = PairClassifier::new(&small(), 6, 2, &mut seeded(8));
        let dag = CellDag::chain(3, Activation::Tanh);
        let batch: Vec<PairExample> = (0..8)
            .map(|i| PairExample { s1: vec![i % 6, 1], s2: vec![(i + 1) % 6], label: i % 2 })
            .collect();
        let refs: Vec<&PairExample> = batch.iter().collect();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.01));
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let mut tape = Tape::new();
            let loss = m.batch_loss(&mut tape, &dag, &refs, None).unwrap();
            let l = tape.scalar(loss);
            assert!(l < last, "{l} !< {last}");
            last = l;
            let g = tape.backward(loss).unwrap();
            adam.step(m.store_mut(), &g).unwrap();
        }
    }
}
