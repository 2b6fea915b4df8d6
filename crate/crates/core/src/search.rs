//! Alternating weight-sharing search: a model phase that trains the shared
//! cell bank on controller-sampled structures, then a controller phase that
//! rewards sampled structures on validation mini-batches.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, AdamConfig, AdamState, ParamStore, Tape};
use crate::cell::CellDag;
use crate::controller::{Baseline, Controller, ControllerConfig, SampledDag};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, TaskModel};
use crate::regularizers::{cas_regularizer_tape, RegConfig, RegTerms};
use crate::rng::{stream, Rng};
use crate::tasks::{mean_score, Metric, TaskDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub epochs: usize,
    /// Shared-parameter mini-batch updates per epoch.
    pub model_steps: usize,
    /// Structures sampled and rewarded per epoch.
    pub controller_samples: usize,
    /// Samples per REINFORCE update; they share one validation mini-batch.
    pub controller_batch: usize,
    pub batch_size: usize,
    /// Validation mini-batch size for rewards.
    pub reward_batch_size: usize,
    /// Chunk size for full-split evaluation.
    pub eval_batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip for model updates; 0 disables.
    pub grad_clip: f64,
    /// Structures sampled by [`derive_best_dag`].
    pub derive_samples: usize,
    pub retrain_epochs: usize,
    pub patience: usize,
    /// Overrides the model's reward metric.
    pub reward_metric: Option<Metric>,
    pub seed: u64,
    pub model: ModelConfig,
    pub controller: ControllerConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            model_steps: 50,
            controller_samples: 50,
            controller_batch: 5,
            batch_size: 64,
            reward_batch_size: 64,
            eval_batch_size: 256,
            lr: 0.001,
            grad_clip: 5.0,
            derive_samples: 100,
            retrain_epochs: 30,
            patience: 5,
            reward_metric: None,
            seed: 0,
            model: ModelConfig::default(),
            controller: ControllerConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("model_steps", self.model_steps),
            ("controller_samples", self.controller_samples),
            ("controller_batch", self.controller_batch),
            ("batch_size", self.batch_size),
            ("reward_batch_size", self.reward_batch_size),
            ("eval_batch_size", self.eval_batch_size),
            ("derive_samples", self.derive_samples),
            ("patience", self.patience),
            ("model.num_nodes", self.model.num_nodes),
            ("model.hidden", self.model.hidden),
            ("model.embed_dim", self.model.embed_dim),
            ("controller.hidden", self.controller.hidden),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if !(self.controller.lr > 0.0) {
            return Err(Error::config("controller.lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub mean_reward: f64,
    pub baseline: f64,
    /// Full-validation score of the best structure seen so far.
    pub best_val: f64,
    #[serde(rename = "reg.sparsity")]
    pub reg_sparsity: f64,
    #[serde(rename = "reg.ortho")]
    pub reg_ortho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainMetrics {
    pub metric: Metric,
    pub val: f64,
    pub test: f64,
    /// Early-stopping criterion value at the kept epoch.
    pub val_reward: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best_dag: CellDag,
    /// Full-validation reward-metric score of `best_dag` under the shared weights.
    pub best_val: f64,
    pub history: Vec<EpochRecord>,
    pub retrain: Option<RetrainMetrics>,
}

/// Endless shuffled pass over `0..n`.
#[derive(Clone, Debug)]
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    pub fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn next(&mut self, size: usize, rng: &mut Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Independent random streams of one search run.
#[derive(Clone, Debug)]
pub struct SearchRngs {
    pub sample: Rng,
    pub data: Rng,
    pub dropout: Rng,
}

impl SearchRngs {
    pub fn new(seed: u64, label: &str) -> Self {
        Self {
            sample: stream(seed, &format!("{label}:sample")),
            data: stream(seed, &format!("{label}:data")),
            dropout: stream(seed, &format!("{label}:dropout")),
        }
    }
}

/// Mean score of `dag` over `examples`, evaluated in chunks, without dropout.
pub fn evaluate_dag<M: TaskModel>(
    model: &M,
    dag: &CellDag,
    examples: &[M::Example],
    metric: Metric,
    chunk: usize,
) -> Result<f64> {
    mean_score(&example_scores(model, dag, examples, metric, chunk)?)
}

pub fn example_scores<M: TaskModel>(
    model: &M,
    dag: &CellDag,
    examples: &[M::Example],
    metric: Metric,
    chunk: usize,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty split"));
    }
    let mut out = Vec::with_capacity(examples.len());
    for c in examples.chunks(chunk.max(1)) {
        let refs: Vec<&M::Example> = c.iter().collect();
        out.extend(model.example_scores(dag, &refs, metric)?);
    }
    Ok(out)
}

pub(crate) fn check_finite(op: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric {
            op: op.into(),
            detail: format!("non-finite value {v}"),
        })
    }
}

/// One Adam step on the task loss of `batch` (plus the weighted regularizer).
/// Returns the task loss and the unweighted regularizer terms.
pub fn train_step<M: TaskModel>(
    model: &mut M,
    dag: &CellDag,
    batch: &[&M::Example],
    reg: Option<&RegConfig>,
    adam: &mut AdamState,
    grad_clip: f64,
    dropout_rng: &mut Rng,
) -> Result<(f64, RegTerms)> {
    let mut tape = Tape::new();
    let loss = model.batch_loss(&mut tape, dag, batch, Some(dropout_rng))?;
    let task_loss = check_finite("train_step", tape.scalar(loss))?;
    let (total, terms) = match reg {
        Some(cfg) => match cas_regularizer_tape(&mut tape, model.store(), cfg) {
            (Some(r), terms) => (tape.add(loss, r), terms),
            (None, terms) => (loss, terms),
        },
        None => (loss, RegTerms::default()),
    };
    let mut grads = tape.backward(total)?;
    if grad_clip > 0.0 {
        clip_global_norm(&mut grads, grad_clip);
    }
    adam.step(model.store_mut(), &grads)?;
    Ok((task_loss, terms))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelPhaseStats {
    pub mean_loss: f64,
    /// Regularizer terms at the last step.
    pub reg: RegTerms,
}

/// `cfg.model_steps` shared-parameter updates, each on a freshly sampled structure.
/// The controller is only read.
#[allow(clippy::too_many_arguments)]
pub fn model_phase<M: TaskModel>(
    model: &mut M,
    ctrl: &Controller,
    train: &[M::Example],
    cfg: &SearchConfig,
    reg: Option<&RegConfig>,
    adam: &mut AdamState,
    batcher: &mut Batcher,
    rngs: &mut SearchRngs,
) -> Result<ModelPhaseStats> {
    let mut total = 0.0;
    let mut last = RegTerms::default();
    for _ in 0..cfg.model_steps {
        let dag = ctrl.sample_dag(&mut rngs.sample).dag;
        let idx = batcher.next(cfg.batch_size, &mut rngs.data);
        let batch: Vec<&M::Example> = idx.iter().map(|&i| &train[i]).collect();
        let (loss, terms) = train_step(model, &dag, &batch, reg, adam, cfg.grad_clip, &mut rngs.dropout)?;
        total += loss;
        last = terms;
    }
    Ok(ModelPhaseStats {
        mean_loss: total / cfg.model_steps as f64,
        reg: last,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerPhaseStats {
    pub mean_reward: f64,
    /// Highest-reward sample of the phase (ties to the smaller decision string).
    pub top: (CellDag, f64),
}

/// Samples `cfg.controller_samples` structures, rewards each on a validation
/// mini-batch through `reward`, and updates the controller every
/// `cfg.controller_batch` samples.
pub fn controller_phase_with(
    ctrl: &mut Controller,
    baseline: &mut Baseline,
    cfg: &SearchConfig,
    rng: &mut Rng,
    mut reward: impl FnMut(&[CellDag], &mut Rng) -> Result<Vec<f64>>,
) -> Result<ControllerPhaseStats> {
    let mut sum = 0.0;
    let mut top: Option<(CellDag, f64)> = None;
    let mut left = cfg.controller_samples;
    while left > 0 {
        let n = left.min(cfg.controller_batch);
        left -= n;
        let samples: Vec<SampledDag> = (0..n).map(|_| ctrl.sample_dag(rng)).collect();
        let dags: Vec<CellDag> = samples.iter().map(|s| s.dag.clone()).collect();
        let rewards = reward(&dags, rng)?;
        for (d, &r) in dags.iter().zip(&rewards) {
            check_finite("reward", r)?;
            sum += r;
            if better(d, r, top.as_ref()) {
                top = Some((d.clone(), r));
            }
        }
        ctrl.reinforce_update(&samples, &rewards, baseline)?;
    }
    Ok(ControllerPhaseStats {
        mean_reward: sum / cfg.controller_samples as f64,
        top: top.expect("controller_samples >= 1"),
    })
}

/// Controller phase for one task: every update's samples share one validation mini-batch.
pub fn controller_phase<M: TaskModel>(
    model: &M,
    ctrl: &mut Controller,
    baseline: &mut Baseline,
    val: &[M::Example],
    cfg: &SearchConfig,
    batcher: &mut Batcher,
    rngs: &mut SearchRngs,
) -> Result<ControllerPhaseStats> {
    let metric = cfg.reward_metric.unwrap_or_else(|| model.reward_metric());
    let data = &mut rngs.data;
    controller_phase_with(ctrl, baseline, cfg, &mut rngs.sample, |dags, _| {
        let idx = batcher.next(cfg.reward_batch_size, data);
        let batch: Vec<M::Example> = idx.iter().map(|&i| val[i].clone()).collect();
        dags.iter()
            .map(|d| evaluate_dag(model, d, &batch, metric, cfg.eval_batch_size))
            .collect()
    })
}

fn better(dag: &CellDag, score: f64, best: Option<&(CellDag, f64)>) -> bool {
    match best {
        None => true,
        Some((b, s)) => score > *s || (score == *s && dag.decisions() < b.decisions()),
    }
}

/// Samples `k` structures and returns the one scoring highest under `score`
/// (ties to the lexicographically smallest decision string), with its score and
/// every distinct evaluated structure.
pub fn derive_best_with(
    ctrl: &Controller,
    k: usize,
    rng: &mut Rng,
    mut score: impl FnMut(&CellDag) -> Result<f64>,
) -> Result<(CellDag, f64, Vec<(CellDag, f64)>)> {
    if k == 0 {
        return Err(Error::contract("derive_best_dag needs k >= 1"));
    }
    let mut seen: BTreeMap<Vec<usize>, (CellDag, f64)> = BTreeMap::new();
    for _ in 0..k {
        let dag = ctrl.sample_dag(rng).dag;
        let key = dag.decisions();
        if !seen.contains_key(&key) {
            let s = check_finite("derive_best_dag", score(&dag)?)?;
            seen.insert(key, (dag, s));
        }
    }
    let mut best: Option<(CellDag, f64)> = None;
    for (dag, s) in seen.values() {
        if better(dag, *s, best.as_ref()) {
            best = Some((dag.clone(), *s));
        }
    }
    let (dag, s) = best.expect("k >= 1");
    Ok((dag, s, seen.into_values().collect()))
}

/// [`derive_best_with`] scored on the full validation split with frozen shared weights.
pub fn derive_best_dag<M: TaskModel>(
    ctrl: &Controller,
    model: &M,
    val: &[M::Example],
    metric: Metric,
    k: usize,
    chunk: usize,
    rng: &mut Rng,
) -> Result<(CellDag, f64)> {
    let (dag, s, _) = derive_best_with(ctrl, k, rng, |d| evaluate_dag(model, d, val, metric, chunk))?;
    Ok((dag, s))
}

/// Search state that outlives one call of [`search_loop`].
#[derive(Clone, Debug)]
pub struct SearchParts {
    pub controller: Controller,
    pub baseline: Baseline,
}

impl SearchParts {
    pub fn new(num_nodes: usize, cfg: &ControllerConfig, seed: u64) -> Self {
        Self {
            controller: Controller::new(num_nodes, cfg.clone(), &mut stream(seed, "controller:init")),
            baseline: Baseline::new(cfg.baseline_decay),
        }
    }
}

/// The alternating loop on an existing model and controller. `reg` adds the
/// continual-learning penalty to every model update. Returns the history and
/// the derived structure with its full-validation score.
pub fn search_loop<M: TaskModel>(
    model: &mut M,
    parts: &mut SearchParts,
    data: &TaskDataset<M::Example>,
    cfg: &SearchConfig,
    reg: Option<&RegConfig>,
    label: &str,
) -> Result<SearchResult> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::contract(format!("task `{}` needs non-empty train and val splits", data.spec.name)));
    }
    if parts.controller.num_nodes() != model.num_nodes() {
        return Err(Error::contract("controller and model disagree on the node count"));
    }
    let metric = cfg.reward_metric.unwrap_or_else(|| model.reward_metric());
    let mut rngs = SearchRngs::new(cfg.seed, label);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut train_batches = Batcher::new(data.train.len());
    let mut val_batches = Batcher::new(data.val.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(CellDag, f64)> = None;
    for epoch in 0..cfg.epochs {
        let m = model_phase(model, &parts.controller, &data.train, cfg, reg, &mut adam, &mut train_batches, &mut rngs)?;
        let c = controller_phase(
            model,
            &mut parts.controller,
            &mut parts.baseline,
            &data.val,
            cfg,
            &mut val_batches,
            &mut rngs,
        )?;
        let top = c.top.0;
        let s = evaluate_dag(model, &top, &data.val, metric, cfg.eval_batch_size)?;
        if better(&top, s, best.as_ref()) {
            best = Some((top, s));
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: m.mean_loss,
            mean_reward: c.mean_reward,
            baseline: parts.baseline.ema,
            best_val: best.as_ref().map_or(0.0, |b| b.1),
            reg_sparsity: m.reg.sparsity,
            reg_ortho: m.reg.ortho,
        };
        log_record(label, &record);
        history.push(record);
    }
    let (best_dag, best_val) = derive_best_dag(
        &parts.controller,
        model,
        &data.val,
        metric,
        cfg.derive_samples,
        cfg.eval_batch_size,
        &mut rngs.sample,
    )?;
    Ok(SearchResult {
        best_dag,
        best_val,
        history,
        retrain: None,
    })
}

/// Progress goes to stderr as one JSON object per epoch when `CELLSEARCH_LOG` is set.
pub(crate) fn log_record<T: Serialize>(label: &str, record: &T) {
    if std::env::var_os("CELLSEARCH_LOG").is_some() {
        let line = serde_json::json!({ "run": label, "record": record });
        eprintln!("{line}");
    }
}

/// Full search on a fresh model, then retraining of the derived structure from
/// scratch on a second fresh model from `build`.
pub fn enas_search<M: TaskModel>(
    build: impl Fn(&mut Rng) -> M,
    data: &TaskDataset<M::Example>,
    cfg: &SearchConfig,
) -> Result<(SearchResult, Controller)> {
    let mut model = build(&mut stream(cfg.seed, "search:init"));
    let mut parts = SearchParts::new(model.num_nodes(), &cfg.controller, cfg.seed);
    let mut result = search_loop(&mut model, &mut parts, data, cfg, None, "search")?;
    let fresh = build(&mut stream(cfg.seed, "retrain:init"));
    result.retrain = Some(retrain(fresh, &result.best_dag, data, cfg)?);
    Ok((result, parts.controller))
}

/// Trains `model` with `dag` fixed, one full shuffled pass per epoch, keeping
/// the parameters of the best validation epoch (by the reward metric) and
/// stopping after `cfg.patience` epochs without improvement.
pub fn retrain<M: TaskModel>(
    mut model: M,
    dag: &CellDag,
    data: &TaskDataset<M::Example>,
    cfg: &SearchConfig,
) -> Result<RetrainMetrics> {
    let (metrics, _) = retrain_model(&mut model, dag, data, cfg, None, "retrain")?;
    Ok(metrics)
}

/// [`retrain`] in place: trains the given parameters (with `reg` added to every
/// update), leaves the best ones in `model`, and also returns the per-epoch
/// validation curve (entry 0 is before training).
pub fn retrain_model<M: TaskModel>(
    model: &mut M,
    dag: &CellDag,
    data: &TaskDataset<M::Example>,
    cfg: &SearchConfig,
    reg: Option<&RegConfig>,
    label: &str,
) -> Result<(RetrainMetrics, Vec<f64>)> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
        return Err(Error::contract(format!("task `{}` needs non-empty splits", data.spec.name)));
    }
    let reward = cfg.reward_metric.unwrap_or_else(|| model.reward_metric());
    let metric = data.spec.metric();
    let chunk = cfg.eval_batch_size;
    let mut rngs = SearchRngs::new(cfg.seed, label);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut batches = Batcher::new(data.train.len());
    let steps = data.train.len().div_ceil(cfg.batch_size);
    let mut best_score = evaluate_dag(model, dag, &data.val, reward, chunk)?;
    let mut best_store: ParamStore = model.store().clone();
    let mut best_epoch = 0;
    let mut epochs_run = 0;
    let mut curve = vec![best_score];
    for epoch in 1..=cfg.retrain_epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let idx = batches.next(cfg.batch_size, &mut rngs.data);
            let batch: Vec<&M::Example> = idx.iter().map(|&i| &data.train[i]).collect();
            total += train_step(model, dag, &batch, reg, &mut adam, cfg.grad_clip, &mut rngs.dropout)?.0;
        }
        epochs_run = epoch;
        let s = evaluate_dag(model, dag, &data.val, reward, chunk)?;
        curve.push(s);
        log_record(
            label,
            &serde_json::json!({ "epoch": epoch, "train_loss": total / steps as f64, "val": s }),
        );
        if s > best_score {
            best_score = s;
            best_store = model.store().clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    *model.store_mut() = best_store;
    let metrics = RetrainMetrics {
        metric,
        val: evaluate_dag(model, dag, &data.val, metric, chunk)?,
        test: evaluate_dag(model, dag, &data.test, metric, chunk)?,
        val_reward: best_score,
        epochs_run,
        best_epoch,
    };
    Ok((metrics, curve))
}

/// Controller-only search against a fixed reward function (no task model).
/// Runs `updates` REINFORCE updates of `batch` samples each.
pub fn oracle_search(
    ctrl: &mut Controller,
    baseline: &mut Baseline,
    updates: usize,
    batch: usize,
    rng: &mut Rng,
    oracle: impl Fn(&CellDag) -> f64,
) -> Result<Vec<f64>> {
    let cfg = SearchConfig {
        controller_samples: batch,
        controller_batch: batch,
        ..SearchConfig::default()
    };
    (0..updates)
        .map(|_| {
            controller_phase_with(ctrl, baseline, &cfg, rng, |dags, _| Ok(dags.iter().map(&oracle).collect()))
                .map(|s| s.mean_reward)
        })
        .collect()
}
