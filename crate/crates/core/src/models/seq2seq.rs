use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::cell::{cell_step, CellDag, SharedCellParams};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tasks::{score, Metric, Output, SeqExample};
use crate::tensor::Tensor;

use super::{argmax_rows, dropout, BiEncoder, ModelConfig, SeqBatch, TaskModel};

/// Additive attention: `e_i = w · tanh(W_a h_i + U_a s + b_a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams {
    pub w_a: ParamId,
    pub u_a: ParamId,
    pub b_a: ParamId,
    pub v: ParamId,
}

impl AttnParams {
    pub fn register(store: &mut ParamStore, enc_dim: usize, dec_dim: usize, attn_dim: usize, scale: f64, rng: &mut Rng) -> Self {
        Self {
            w_a: store.add("attn.w_a", Tensor::uniform(attn_dim, enc_dim, scale, rng)),
            u_a: store.add("attn.u_a", Tensor::uniform(attn_dim, dec_dim, scale, rng)),
            b_a: store.add("attn.b_a", Tensor::zeros(1, attn_dim)),
            v: store.add("attn.v", Tensor::uniform(1, attn_dim, scale, rng)),
        }
    }

    /// `W_a h_i` for every encoder state; reused across decoder steps.
    fn project(&self, tape: &mut Tape, store: &ParamStore, enc: &[Var]) -> Vec<Var> {
        let w = tape.param(store, self.w_a);
        enc.iter().map(|&h| tape.matmul_t(h, w)).collect()
    }

    fn context(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s_prev: Var,
        enc: &[Var],
        enc_proj: &[Var],
        mask: &[Vec<bool>],
    ) -> (Var, Var) {
        let u = tape.param(store, self.u_a);
        let b = tape.param(store, self.b_a);
        let v = tape.param(store, self.v);
        let us = tape.matmul_t(s_prev, u);
        let us = tape.add_row(us, b);
        let scores: Vec<Var> = enc_proj
            .iter()
            .map(|&wh| {
                let z = tape.add(wh, us);
                let z = tape.tanh(z);
                tape.matmul_t(z, v)
            })
            .collect();
        let e = tape.concat_cols(&scores);
        let alpha = tape.masked_softmax(e, mask);
        let ctx = tape.weighted_sum(alpha, enc);
        (alpha, ctx)
    }
}

/// Attention weights (`B x S`) and context (`B x enc_dim`) for decoder state
/// `s_prev` over encoder states `enc` (each `B x enc_dim`). `mask[b][i]` marks
/// real source positions.
pub fn attention_context(
    tape: &mut Tape,
    store: &ParamStore,
    attn: &AttnParams,
    s_prev: Var,
    enc: &[Var],
    mask: &[Vec<bool>],
) -> (Var, Var) {
    let proj = attn.project(tape, store, enc);
    attn.context(tape, store, s_prev, enc, &proj, mask)
}

/// Greedy decoding output: tokens per row (EOS stripped) and the attention
/// weights of every decoder step.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub tokens: Vec<Vec<usize>>,
    pub attention: Vec<Tensor>,
}

/// Bidirectional encoder, attention, and a decoder running the same searched
/// cell on `[embed(w_{t−1}); c_t]`. Output logits come from `[s_t; c_t]`.
///
/// Target symbols are `0..tgt_vocab`; [`AttnSeq2Seq::eos`] and
/// [`AttnSeq2Seq::bos`] follow them.
#[derive(Clone, Debug)]
pub struct AttnSeq2Seq {
    pub config: ModelConfig,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    store: ParamStore,
    pub embed: ParamId,
    pub encoder: BiEncoder,
    pub dec_embed: ParamId,
    pub decoder: SharedCellParams,
    pub attn: AttnParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

struct Encoded {
    states: Vec<Var>,
    proj: Vec<Var>,
    /// `mask[b][i]`.
    mask: Vec<Vec<bool>>,
}

impl AttnSeq2Seq {
    pub fn new(config: &ModelConfig, src_vocab: usize, tgt_vocab: usize, rng: &mut Rng) -> Self {
        let s = config.init_scale;
        let (e, h) = (config.embed_dim, config.hidden);
        let mut store = ParamStore::new();
        let embed = store.add("embed", Tensor::uniform(src_vocab, e, s, rng));
        let encoder = BiEncoder::register(&mut store, "enc", e, h, config.num_nodes, s, rng);
        let dec_embed = store.add("dec.embed", Tensor::uniform(tgt_vocab + 2, e, s, rng));
        let decoder = SharedCellParams::register(&mut store, "dec.cell", e + 2 * h, h, config.num_nodes, s, rng);
        let attn = AttnParams::register(&mut store, 2 * h, h, config.attn_dim, s, rng);
        let out_w = store.add("out.w", Tensor::uniform(tgt_vocab + 1, 3 * h, s, rng));
        let out_b = store.add("out.b", Tensor::zeros(1, tgt_vocab + 1));
        Self {
            config: config.clone(),
            src_vocab,
            tgt_vocab,
            store,
            embed,
            encoder,
            dec_embed,
            decoder,
            attn,
            out_w,
            out_b,
        }
    }

    pub fn eos(&self) -> usize {
        self.tgt_vocab
    }

    pub fn bos(&self) -> usize {
        self.tgt_vocab + 1
    }

    fn encode(&self, tape: &mut Tape, dag: &CellDag, srcs: &[&[usize]], rng: Option<&mut Rng>) -> Result<Encoded> {
        let batch = SeqBatch::new(srcs, self.src_vocab)?;
        let xs = batch.embed(tape, &self.store, self.embed, self.config.dropout, rng);
        let states = self
            .encoder
            .encode(tape, &self.store, dag, self.config.feedback, &xs, &batch)?;
        let proj = self.attn.project(tape, &self.store, &states);
        let mask = (0..batch.rows())
            .map(|b| (0..batch.steps()).map(|t| batch.valid[t][b]).collect())
            .collect();
        Ok(Encoded { states, proj, mask })
    }

    /// One decoder step: returns `(logits, next state, attention weights)`.
    #[allow(clippy::too_many_arguments)]
    fn dec_step(
        &self,
        tape: &mut Tape,
        dag: &CellDag,
        enc: &Encoded,
        s: Var,
        prev_tokens: &[usize],
        mut rng: Option<&mut Rng>,
    ) -> Result<(Var, Var, Var)> {
        let (alpha, ctx) = self.attn.context(tape, &self.store, s, &enc.states, &enc.proj, &enc.mask);
        let table = tape.param(&self.store, self.dec_embed);
        let emb = tape.gather(table, prev_tokens);
        let emb = dropout(tape, emb, self.config.dropout, rng.as_deref_mut());
        let x = tape.concat_cols(&[emb, ctx]);
        let out = cell_step(tape, &self.store, &self.decoder, dag, self.config.feedback, x, s)?;
        let feat = tape.concat_cols(&[out.output, ctx]);
        let feat = dropout(tape, feat, self.config.dropout, rng);
        let w = tape.param(&self.store, self.out_w);
        let b = tape.param(&self.store, self.out_b);
        let z = tape.matmul_t(feat, w);
        let z = tape.add_row(z, b);
        Ok((z, out.feedback, alpha))
    }

    /// Greedy decoding of at most `max_len` symbols per source.
    pub fn decode_greedy(&self, dag: &CellDag, srcs: &[&[usize]], max_len: usize) -> Result<Decoded> {
        if max_len == 0 {
            return Err(Error::contract("max_len must be at least 1"));
        }
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, dag, srcs, None)?;
        let rows = srcs.len();
        let mut s = tape.constant(Tensor::zeros(rows, self.config.hidden));
        let mut prev = vec![self.bos(); rows];
        let mut tokens = vec![Vec::new(); rows];
        let mut done = vec![false; rows];
        let mut attention = Vec::new();
        for _ in 0..max_len {
            let (z, s_next, alpha) = self.dec_step(&mut tape, dag, &enc, s, &prev, None)?;
            attention.push(tape.value(alpha).clone());
            let best = argmax_rows(tape.value(z));
            for b in 0..rows {
                if done[b] {
                    continue;
                }
                if best[b] == self.eos() {
                    done[b] = true;
                } else {
                    tokens[b].push(best[b]);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
            prev = best;
            s = s_next;
        }
        Ok(Decoded { tokens, attention })
    }
}

impl TaskModel for AttnSeq2Seq {
    type Example = SeqExample;

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
        vec![self.out_w, self.out_b]
    }

    /// Teacher-forced cross-entropy averaged over every target symbol and the final EOS.
    fn batch_loss(
        &self,
        tape: &mut Tape,
        dag: &CellDag,
        batch: &[&SeqExample],
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        if let Some(&bad) = batch.iter().flat_map(|e| e.tgt.iter()).find(|&&x| x >= self.tgt_vocab) {
            return Err(Error::contract(format!("target id {bad} outside vocabulary of {}", self.tgt_vocab)));
        }
        let srcs: Vec<&[usize]> = batch.iter().map(|e| e.src.as_slice()).collect();
        let enc = self.encode(tape, dag, &srcs, rng.as_deref_mut())?;
        let rows = batch.len();
        let steps = batch.iter().map(|e| e.tgt.len()).max().unwrap_or(0) + 1;
        let total: f64 = batch.iter().map(|e| (e.tgt.len() + 1) as f64).sum();
        let mut s = tape.constant(Tensor::zeros(rows, self.config.hidden));
        let mut prev = vec![self.bos(); rows];
        let mut loss: Option<Var> = None;
        for t in 0..steps {
            let mut targets = vec![0; rows];
            let mut weights = vec![0.0; rows];
            for (b, e) in batch.iter().enumerate() {
                if t < e.tgt.len() {
                    targets[b] = e.tgt[t];
                    weights[b] = 1.0;
                } else if t == e.tgt.len() {
                    targets[b] = self.eos();
                    weights[b] = 1.0;
                }
            }
            let (z, s_next, _) = self.dec_step(tape, dag, &enc, s, &prev, rng.as_deref_mut())?;
            let n: f64 = weights.iter().sum();
            let ce = tape.cross_entropy(z, &targets, &weights);
            let ce = tape.scale(ce, n / total);
            loss = Some(match loss {
                Some(l) => tape.add(l, ce),
                None => ce,
            });
            s = tape.blend(s_next, s, &weights);
            prev = targets;
        }
        Ok(loss.expect("at least one decoder step"))
    }

    fn example_scores(&self, dag: &CellDag, batch: &[&SeqExample], metric: Metric) -> Result<Vec<f64>> {
        let srcs: Vec<&[usize]> = batch.iter().map(|e| e.src.as_slice()).collect();
        let max_len = batch.iter().map(|e| e.src.len()).max().unwrap_or(1) * 2 + 2;
        let dec = self.decode_greedy(dag, &srcs, max_len)?;
        dec.tokens
            .into_iter()
            .zip(batch)
            .map(|(p, e)| score(metric, &Output::Tokens(p), &Output::Tokens(e.tgt.clone())))
            .collect()
    }

    fn reward_metric(&self) -> Metric {
        Metric::TokenAccuracy
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_with, AdamConfig, AdamState};
    use crate::cell::Activation;
    use crate::rng::seeded;

    fn small() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            hidden: 3,
            num_nodes: 2,
            attn_dim: 3,
            dropout: 0.0,
            init_scale: 0.5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn attention_examples() {
        let m = AttnSeq2Seq::new(&small(), 5, 5, &mut seeded(0));
        let mut rng = seeded(1);
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::uniform(2, 3, 1.0, &mut rng));
        let h = tape.constant(Tensor::uniform(2, 6, 1.0, &mut rng));
        let (alpha, ctx) = attention_context(&mut tape, m.store(), &m.attn, s, &[h], &[vec![true], vec![true]]);
        assert_eq!(tape.value(alpha), &Tensor::from_vec(2, 1, vec![1.0, 1.0]));
        assert_eq!(tape.value(ctx), tape.value(h));

        let (alpha, _) = attention_context(&mut tape, m.store(), &m.attn, s, &[h, h, h], &[vec![true; 3], vec![true; 3]]);
        for &a in tape.value(alpha).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }

        // Loop oracle on a random instance with one padded position.
        let hs: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(2, 6, 1.0, &mut rng)).collect();
        let hv: Vec<Var> = hs.iter().map(|t| tape.constant(t.clone())).collect();
        let mask = vec![vec![true; 4], vec![true, true, true, false]];
        let (alpha, ctx) = attention_context(&mut tape, m.store(), &m.attn, s, &hv, &mask);
        let w = |id| m.store().value(id).clone();
        let (wa, ua, ba, v) = (w(m.attn.w_a), w(m.attn.u_a), w(m.attn.b_a), w(m.attn.v));
        let sv = tape.value(s).clone();
        for b in 0..2 {
            let n = if b == 0 { 4 } else { 3 };
            let mut e = Vec::new();
            for h in hs.iter().take(n) {
                let mut acc = 0.0;
                for k in 0..3 {
                    let mut z = ba.get(0, k);
                    for j in 0..6 {
                        z += wa.get(k, j) * h.get(b, j);
                    }
                    for j in 0..3 {
                        z += ua.get(k, j) * sv.get(b, j);
                    }
                    acc += v.get(0, k) * z.tanh();
                }
                e.push(acc);
            }
            let mx = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = e.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            let a: Vec<f64> = ex.iter().map(|x| x / z).collect();
            let av = tape.value(alpha);
            assert!((av.row(b).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..n {
                assert!((av.get(b, i) - a[i]).abs() < 1e-12);
            }
            if n == 3 {
                assert_eq!(av.get(b, 3), 0.0);
            }
            for j in 0..6 {
                let c: f64 = (0..n).map(|i| a[i] * hs[i].get(b, j)).sum();
                assert!((tape.value(ctx).get(b, j) - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rigged_eos_gives_empty_output_and_length_is_bounded() {
        let mut m = AttnSeq2Seq::new(&small(), 5, 5, &mut seeded(2));
        let dag = CellDag::chain(2, Activation::Tanh);
        let srcs: [&[usize]; 2] = [&[1, 2, 3], &[4]];
        let dec = m.decode_greedy(&dag, &srcs, 4).unwrap();
        assert!(dec.tokens.iter().all(|t| t.len() <= 4));
        for a in &dec.attention {
            for r in 0..a.rows() {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let mut bias = vec![0.0; 6];
        bias[m.eos()] = 1e3;
        let id = m.out_b;
        m.store_mut().set_value(id, Tensor::row_vector(&bias));
        let dec = m.decode_greedy(&dag, &srcs, 4).unwrap();
        assert!(dec.tokens.iter().all(|t| t.is_empty()));
        // Never-EOS: output fills max_len exactly.
        bias[m.eos()] = -1e3;
        m.store_mut().set_value(id, Tensor::row_vector(&bias));
        let dec = m.decode_greedy(&dag, &srcs, 4).unwrap();
        assert!(dec.tokens.iter().all(|t| t.len() == 4));
    }

    #[test]
    fn end_to_end_gradient_check() {
        let mut m = AttnSeq2Seq::new(&small(), 5, 4, &mut seeded(3));
        let dag = CellDag::new(vec![Activation::Tanh, Activation::Sigmoid], vec![0]).unwrap();
        let batch = vec![
            SeqExample { src: vec![1, 2, 3], tgt: vec![3, 2] },
            SeqExample { src: vec![4], tgt: vec![0, 1, 1] },
        ];
        let refs: Vec<&SeqExample> = batch.iter().collect();
        let errs = grad_check_with(&mut m, |m| m.store_mut(), |tape, m| m.batch_loss(tape, &dag, &refs, None).unwrap(), 1e-6);
        for (id, e) in errs {
            assert!(e < 1e-4, "{}: {e}", m.store().get(id).name);
        }
    }

    #[test]
    fn loss_decreases_and_teacher_forcing_learns_a_tiny_copy() {
        let cfg = ModelConfig {
            hidden: 8,
            embed_dim: 8,
            attn_dim: 8,
            ..small()
        };
        let mut m = AttnSeq2Seq::new(&cfg, 4, 4, &mut seeded(4));
        let dag = CellDag::chain(2, Activation::Tanh);
        let batch: Vec<SeqExample> = [[0usize, 1], [2, 3], [1, 1], [3, 0]]
            .iter()
            .map(|s| SeqExample { src: s.to_vec(), tgt: s.to_vec() })
            .collect();
        let refs: Vec<&SeqExample> = batch.iter().collect();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.02));
        let mut last = f64::INFINITY;
        for step in 0..300 {
            let mut tape = Tape::new();
            let loss = m.batch_loss(&mut tape, &dag, &refs, None).unwrap();
            let l = tape.scalar(loss);
            if step < 10 {
                assert!(l < last, "step {step}: {l} !< {last}");
            }
            last = l;
            let g = tape.backward(loss).unwrap();
            adam.step(m.store_mut(), &g).unwrap();
        }
        let scores = m.example_scores(&dag, &refs, Metric::ExactMatch).unwrap();
        assert_eq!(scores, vec![1.0; 4]);
    }
}
