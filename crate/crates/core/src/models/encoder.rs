use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::cell::{unroll, CellDag, Feedback, SharedCellParams};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::dropout;

/// A batch of variable-length token sequences laid out time-major, padded with
/// token 0 and masked.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    /// `ids[t][b]`.
    pub ids: Vec<Vec<usize>>,
    /// `mask[t][b]` is 1.0 while `t < lens[b]`.
    pub mask: Vec<Vec<f64>>,
    pub valid: Vec<Vec<bool>>,
    pub lens: Vec<usize>,
}

impl SeqBatch {
    pub fn new(seqs: &[&[usize]], vocab: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        if lens.contains(&0) {
            return Err(Error::contract("empty token sequence"));
        }
        if let Some(&bad) = seqs.iter().flat_map(|s| s.iter()).find(|&&x| x >= vocab) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let t_max = *lens.iter().max().expect("non-empty");
        let mut ids = vec![vec![0; seqs.len()]; t_max];
        let mut valid = vec![vec![false; seqs.len()]; t_max];
        for (b, s) in seqs.iter().enumerate() {
            for (t, &x) in s.iter().enumerate() {
                ids[t][b] = x;
                valid[t][b] = true;
            }
        }
        let mask = valid
            .iter()
            .map(|row| row.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())
            .collect();
        Ok(Self { ids, mask, valid, lens })
    }

    pub fn steps(&self) -> usize {
        self.ids.len()
    }

    pub fn rows(&self) -> usize {
        self.lens.len()
    }

    /// Embedding rows per step, with dropout when `rng` is given.
    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        table: ParamId,
        p: f64,
        mut rng: Option<&mut Rng>,
    ) -> Vec<Var> {
        let table = tape.param(store, table);
        self.ids
            .iter()
            .map(|ids| {
                let e = tape.gather(table, ids);
                dropout(tape, e, p, rng.as_deref_mut())
            })
            .collect()
    }
}

/// Forward and backward unrolls of one cell structure over separate weight banks.
#[derive(Clone, Debug, PartialEq)]
pub struct BiEncoder {
    pub fwd: SharedCellParams,
    pub bwd: SharedCellParams,
}

impl BiEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        num_nodes: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Self {
        let fwd = SharedCellParams::register(store, &format!("{prefix}.fwd.cell"), input_dim, hidden, num_nodes, scale, rng);
        let bwd = SharedCellParams::register(store, &format!("{prefix}.bwd.cell"), input_dim, hidden, num_nodes, scale, rng);
        Self { fwd, bwd }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    /// Per-step states `[forward; backward]`, each `B x 2·hidden`. Padded
    /// positions hold whatever state the row had at its boundary.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        dag: &CellDag,
        feedback: Feedback,
        xs: &[Var],
        batch: &SeqBatch,
    ) -> Result<Vec<Var>> {
        let h0 = tape.constant(Tensor::zeros(batch.rows(), self.hidden()));
        let fwd = unroll(tape, store, &self.fwd, dag, feedback, xs, h0, Some(&batch.mask))?;
        let rev_xs: Vec<Var> = xs.iter().rev().copied().collect();
        let rev_mask: Vec<Vec<f64>> = batch.mask.iter().rev().cloned().collect();
        let mut bwd = unroll(tape, store, &self.bwd, dag, feedback, &rev_xs, h0, Some(&rev_mask))?;
        bwd.reverse();
        Ok(fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| tape.concat_cols(&[f, b]))
            .collect())
    }

    /// Element-wise max of [`BiEncoder::encode`] over each row's valid steps.
    pub fn encode_pool(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        dag: &CellDag,
        feedback: Feedback,
        xs: &[Var],
        batch: &SeqBatch,
    ) -> Result<Var> {
        let states = self.encode(tape, store, dag, feedback, xs, batch)?;
        Ok(tape.masked_max(&states, &batch.valid))
    }
}
