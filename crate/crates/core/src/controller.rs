//! Autoregressive LSTM policy over cell structures, trained with REINFORCE.
//!
//! Decisions are emitted in the order of [`CellDag::decisions`]. Each decision
//! has its own output projection (plus bias); the chosen option is embedded and
//! fed to the next LSTM step. Output projections start at zero, so a fresh
//! controller is exactly uniform over all structures.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, ParamId, ParamStore, Tape, Var};
use crate::cell::CellDag;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub lr: f64,
    pub baseline_decay: f64,
    pub entropy_coeff: f64,
    /// Logits are divided by this before the softmax.
    pub temperature: Option<f64>,
    /// When set, logits become `c · tanh(logits)`.
    pub tanh_constant: Option<f64>,
    pub init_scale: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 0.00035,
            baseline_decay: 0.95,
            entropy_coeff: 1e-4,
            temperature: None,
            tanh_constant: None,
            init_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledDag {
    pub dag: CellDag,
    /// Sum of per-decision log-probabilities.
    pub log_prob: f64,
    /// Sum of per-decision entropies.
    pub entropy: f64,
}

/// Exponential moving average of rewards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub ema: f64,
    pub decay: f64,
    pub initialized: bool,
}

impl Baseline {
    pub fn new(decay: f64) -> Self {
        Self {
            ema: 0.0,
            decay,
            initialized: false,
        }
    }

    pub fn update(&mut self, reward: f64) {
        if self.initialized {
            self.ema = self.decay * self.ema + (1.0 - self.decay) * reward;
        } else {
            self.ema = reward;
            self.initialized = true;
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Prev,
    Act,
}

#[derive(Clone, Debug)]
struct Decision {
    kind: Kind,
    out: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Controller {
    pub config: ControllerConfig,
    num_nodes: usize,
    store: ParamStore,
    lstm_w: ParamId,
    lstm_b: ParamId,
    start: ParamId,
    embed_prev: ParamId,
    embed_act: ParamId,
    decisions: Vec<Decision>,
    adam: AdamState,
}

enum Mode<'a> {
    Sample(&'a mut Rng),
    Teacher(&'a [usize]),
}

struct Forward {
    choices: Vec<usize>,
    log_prob: Var,
    entropy: Var,
    /// Final per-decision distributions.
    dists: Vec<Vec<f64>>,
}

impl Controller {
    pub fn new(num_nodes: usize, config: ControllerConfig, rng: &mut Rng) -> Self {
        assert!(num_nodes >= 1, "a cell needs at least one node");
        let h = config.hidden;
        let s = config.init_scale;
        let mut store = ParamStore::new();
        let lstm_w = store.add("controller.lstm.w", Tensor::uniform(4 * h, 2 * h, s, rng));
        let lstm_b = store.add("controller.lstm.b", Tensor::zeros(1, 4 * h));
        let start = store.add("controller.start", Tensor::uniform(1, h, s, rng));
        let embed_prev = store.add(
            "controller.embed.prev",
            Tensor::uniform(num_nodes.max(1), h, s, rng),
        );
        let embed_act = store.add("controller.embed.act", Tensor::uniform(4, h, s, rng));
        let mut decisions = Vec::new();
        for l in 0..num_nodes {
            if l > 0 {
                decisions.push(Decision {
                    kind: Kind::Prev,
                    out: store.add(format!("controller.out.prev.{}", l + 1), Tensor::zeros(l, h)),
                    bias: store.add(format!("controller.bias.prev.{}", l + 1), Tensor::zeros(1, l)),
                });
            }
            decisions.push(Decision {
                kind: Kind::Act,
                out: store.add(format!("controller.out.act.{}", l + 1), Tensor::zeros(4, h)),
                bias: store.add(format!("controller.bias.act.{}", l + 1), Tensor::zeros(1, 4)),
            });
        }
        let adam = AdamState::new(AdamConfig::with_lr(config.lr));
        Self {
            config,
            num_nodes,
            store,
            lstm_w,
            lstm_b,
            start,
            embed_prev,
            embed_act,
            decisions,
            adam,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Forgets Adam moments (parameters are kept).
    pub fn reset_optimizer(&mut self) {
        self.adam = AdamState::new(AdamConfig::with_lr(self.config.lr));
    }

    fn forward(&self, tape: &mut Tape, mut mode: Mode<'_>) -> Result<Forward> {
        let hsz = self.config.hidden;
        let w = tape.param(&self.store, self.lstm_w);
        let b = tape.param(&self.store, self.lstm_b);
        let mut input = tape.param(&self.store, self.start);
        let mut h = tape.constant(Tensor::zeros(1, hsz));
        let mut c = tape.constant(Tensor::zeros(1, hsz));
        let mut log_prob = tape.constant(Tensor::scalar(0.0));
        let mut entropy = tape.constant(Tensor::scalar(0.0));
        let mut choices = Vec::with_capacity(self.decisions.len());
        let mut dists = Vec::with_capacity(self.decisions.len());

        for (k, d) in self.decisions.iter().enumerate() {
            let xh = tape.concat_cols(&[input, h]);
            let z = tape.matmul_t(xh, w);
            let z = tape.add_row(z, b);
            let zi = tape.slice_cols(z, 0, hsz);
            let zf = tape.slice_cols(z, hsz, hsz);
            let zg = tape.slice_cols(z, 2 * hsz, hsz);
            let zo = tape.slice_cols(z, 3 * hsz, hsz);
            let i = tape.sigmoid(zi);
            let f = tape.sigmoid(zf);
            let g = tape.tanh(zg);
            let o = tape.sigmoid(zo);
            let fc = tape.mul(f, c);
            let ig = tape.mul(i, g);
            c = tape.add(fc, ig);
            let tc = tape.tanh(c);
            h = tape.mul(o, tc);

            let wo = tape.param(&self.store, d.out);
            let bo = tape.param(&self.store, d.bias);
            let mut logits = tape.matmul_t(h, wo);
            logits = tape.add(logits, bo);
            if let Some(t) = self.config.temperature {
                logits = tape.scale(logits, 1.0 / t);
            }
            if let Some(tc) = self.config.tanh_constant {
                logits = tape.tanh(logits);
                logits = tape.scale(logits, tc);
            }
            let logp = tape.log_softmax(logits);
            let p = tape.softmax(logits);
            let probs = tape.value(p).data().to_vec();

            let choice = match &mut mode {
                Mode::Sample(rng) => {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut pick = probs.len() - 1;
                    for (j, &q) in probs.iter().enumerate() {
                        acc += q;
                        if u < acc {
                            pick = j;
                            break;
                        }
                    }
                    pick
                }
                Mode::Teacher(ds) => {
                    let ch = ds[k];
                    if ch >= probs.len() {
                        return Err(Error::contract(format!(
                            "decision {k} is {ch} but only {} options exist",
                            probs.len()
                        )));
                    }
                    ch
                }
            };
            let lp = tape.pick(logp, &[choice]);
            log_prob = tape.add(log_prob, lp);
            let plogp = tape.mul(p, logp);
            let s = tape.sum_all(plogp);
            entropy = tape.sub(entropy, s);

            let table = match d.kind {
                Kind::Prev => self.embed_prev,
                Kind::Act => self.embed_act,
            };
            let table = tape.param(&self.store, table);
            input = tape.gather(table, &[choice]);
            choices.push(choice);
            dists.push(probs);
        }
        Ok(Forward {
            choices,
            log_prob,
            entropy,
            dists,
        })
    }

    pub fn sample_dag(&self, rng: &mut Rng) -> SampledDag {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, Mode::Sample(rng)).expect("sampling cannot fail");
        SampledDag {
            dag: CellDag::from_decisions(&fwd.choices).expect("sampled decisions are valid"),
            log_prob: tape.scalar(fwd.log_prob),
            entropy: tape.scalar(fwd.entropy),
        }
    }

    fn check(&self, dag: &CellDag) -> Result<()> {
        if dag.num_nodes() != self.num_nodes {
            return Err(Error::contract(format!(
                "controller samples {}-node cells, got a {}-node dag",
                self.num_nodes,
                dag.num_nodes()
            )));
        }
        Ok(())
    }

    /// Log-probability of emitting exactly `dag` (teacher-forced).
    pub fn dag_log_prob(&self, dag: &CellDag) -> Result<f64> {
        self.check(dag)?;
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, Mode::Teacher(&dag.decisions()))?;
        Ok(tape.scalar(fwd.log_prob))
    }

    /// Per-decision distributions seen while teacher-forcing `dag`.
    pub fn decision_distributions(&self, dag: &CellDag) -> Result<Vec<Vec<f64>>> {
        self.check(dag)?;
        let mut tape = Tape::new();
        Ok(self.forward(&mut tape, Mode::Teacher(&dag.decisions()))?.dists)
    }

    /// One Adam step on
    /// `−mean[(r − b) · log p] − entropy_coeff · mean[entropy]`,
    /// where `b` is the baseline before this call (the batch mean of the rewards
    /// if the baseline has never been set). The baseline then absorbs every reward
    /// in order. Returns the loss.
    pub fn reinforce_update(
        &mut self,
        samples: &[SampledDag],
        rewards: &[f64],
        baseline: &mut Baseline,
    ) -> Result<f64> {
        if samples.is_empty() || samples.len() != rewards.len() {
            return Err(Error::contract(format!(
                "reinforce_update needs matching non-empty samples and rewards ({} vs {})",
                samples.len(),
                rewards.len()
            )));
        }
        if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(Error::Numeric {
                op: "reinforce_update".into(),
                detail: format!("non-finite reward {r}"),
            });
        }
        let n = samples.len() as f64;
        let b = if baseline.initialized {
            baseline.ema
        } else {
            rewards.iter().sum::<f64>() / n
        };
        let mut tape = Tape::new();
        let mut loss = tape.constant(Tensor::scalar(0.0));
        for (s, &r) in samples.iter().zip(rewards) {
            self.check(&s.dag)?;
            let fwd = self.forward(&mut tape, Mode::Teacher(&s.dag.decisions()))?;
            let pg = tape.scale(fwd.log_prob, -(r - b) / n);
            let ent = tape.scale(fwd.entropy, -self.config.entropy_coeff / n);
            loss = tape.add(loss, pg);
            loss = tape.add(loss, ent);
        }
        let grads = tape.backward(loss)?;
        self.adam.step(&mut self.store, &grads)?;
        for &r in rewards {
            baseline.update(r);
        }
        Ok(tape.scalar(loss))
    }
}
