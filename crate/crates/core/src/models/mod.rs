//! Task models built around the searched cell.

mod encoder;
mod pair;
mod seq2seq;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use encoder::{BiEncoder, SeqBatch};
pub use pair::PairClassifier;
pub use seq2seq::{attention_context, AttnParams, AttnSeq2Seq, Decoded};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::cell::{CellDag, Feedback};
use crate::error::Result;
use crate::rng::Rng;
use crate::tasks::Metric;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub num_nodes: usize,
    pub attn_dim: usize,
    /// Inverted-dropout rate on embeddings and on the features fed to the output layer.
    pub dropout: f64,
    /// Weights start uniform in `(-init_scale, init_scale)`.
    pub init_scale: f64,
    pub feedback: Feedback,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 32,
            num_nodes: 6,
            attn_dim: 32,
            dropout: 0.5,
            init_scale: 0.1,
            feedback: Feedback::LooseEndAvg,
        }
    }
}

/// What the search loop needs from a model.
pub trait TaskModel: Clone {
    type Example: Clone;

    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn num_nodes(&self) -> usize;
    /// Task-specific output layer, kept per task in continual training.
    fn head_ids(&self) -> Vec<ParamId>;
    /// Mean training loss over `batch`. Dropout is active only when `rng` is given.
    fn batch_loss(
        &self,
        tape: &mut Tape,
        dag: &CellDag,
        batch: &[&Self::Example],
        rng: Option<&mut Rng>,
    ) -> Result<Var>;
    /// Per-example scores in `[0, 1]`, without dropout.
    fn example_scores(&self, dag: &CellDag, batch: &[&Self::Example], metric: Metric) -> Result<Vec<f64>>;
    /// Metric used as the controller's reward.
    fn reward_metric(&self) -> Metric;

    /// Redraws the head weights.
    fn reinit_head(&mut self, scale: f64, rng: &mut Rng) {
        for id in self.head_ids() {
            let (r, c) = self.store().value(id).shape();
            self.store_mut().set_value(id, Tensor::uniform(r, c, scale, rng));
        }
    }
}

/// Inverted dropout: keeps each entry with probability `1 - p` and rescales by `1 / (1 - p)`.
pub(crate) fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut Rng>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let (r, c) = tape.shape(x);
            let keep = 1.0 - p;
            let data = (0..r * c)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            tape.mul_const(x, Tensor::from_vec(r, c, data))
        }
        _ => x,
    }
}

/// Index of the largest entry in each row (ties to the lowest index).
pub(crate) fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
