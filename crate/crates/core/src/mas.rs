//! Multi-task search: one controller rewarded with the mean of per-task
//! validation scores, each task training its own disjoint model.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState};
use crate::cell::{Activation, CellDag};
use crate::error::{Error, Result};
use crate::models::TaskModel;
use crate::rng::{stream, Rng};
use crate::search::{
    controller_phase_with, derive_best_with, evaluate_dag, log_record, model_phase, retrain, Batcher, RetrainMetrics,
    SearchConfig, SearchParts, SearchRngs,
};
use crate::tasks::TaskDataset;

/// Arithmetic mean of per-task rewards. The values are summed in sorted order
/// with compensation, so the result does not depend on the input order.
pub fn joint_reward(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::contract("joint reward of no tasks"));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::Numeric {
            op: "joint_reward".into(),
            detail: format!("non-finite reward {r}"),
        });
    }
    let mut v = rewards.to_vec();
    v.sort_by(f64::total_cmp);
    // Neumaier summation.
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in v {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    Ok((sum + comp) / rewards.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasEpoch {
    pub epoch: usize,
    pub mean_joint_reward: f64,
    /// Mean reward of each task over the epoch's samples.
    pub task_rewards: Vec<f64>,
    pub baseline: f64,
    pub train_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasResult {
    pub tasks: Vec<String>,
    pub dag: serde_json::Value,
    /// Joint full-validation score of the returned structure.
    pub joint_val: f64,
    pub task_val: Vec<f64>,
    pub history: Vec<MasEpoch>,
}

/// Searches one structure for all `tasks`. Each task owns a model from
/// `build`; only the controller is shared. Every epoch runs `model_steps`
/// rounds in which each task in turn takes one update on its own sampled
/// structure, then a controller phase where each sample is scored on every
/// task's validation mini-batch and rewarded with the joint reward.
pub fn mas_search<M: TaskModel>(
    build: impl Fn(&mut Rng) -> M,
    tasks: &[TaskDataset<M::Example>],
    cfg: &SearchConfig,
) -> Result<(CellDag, MasResult)> {
    let (dag, result, _) = mas_search_models(build, tasks, cfg)?;
    Ok((dag, result))
}

/// [`mas_search`] that also hands back the trained per-task models.
pub fn mas_search_models<M: TaskModel>(
    build: impl Fn(&mut Rng) -> M,
    tasks: &[TaskDataset<M::Example>],
    cfg: &SearchConfig,
) -> Result<(CellDag, MasResult, Vec<M>)> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::contract("multi-task search needs at least one task"));
    }
    let seed = cfg.seed;
    let mut models: Vec<M> = (0..tasks.len())
        .map(|i| build(&mut stream(seed, &format!("mas:init:{i}"))))
        .collect();
    let nodes = models[0].num_nodes();
    if models.iter().any(|m| m.num_nodes() != nodes) {
        return Err(Error::contract("tasks disagree on the cell size"));
    }
    for t in tasks {
        if t.train.is_empty() || t.val.is_empty() {
            return Err(Error::contract(format!("task `{}` needs non-empty train and val splits", t.spec.name)));
        }
    }
    let metrics: Vec<_> = models
        .iter()
        .map(|m| cfg.reward_metric.unwrap_or_else(|| m.reward_metric()))
        .collect();
    let mut parts = SearchParts::new(nodes, &cfg.controller, seed);
    let mut ctrl_rng = stream(seed, "mas:controller");
    let mut rngs: Vec<SearchRngs> = (0..tasks.len()).map(|i| SearchRngs::new(seed, &format!("mas:{i}"))).collect();
    let mut adams: Vec<AdamState> = (0..tasks.len()).map(|_| AdamState::new(AdamConfig::with_lr(cfg.lr))).collect();
    let mut train_b: Vec<Batcher> = tasks.iter().map(|t| Batcher::new(t.train.len())).collect();
    let mut val_b: Vec<Batcher> = tasks.iter().map(|t| Batcher::new(t.val.len())).collect();
    let one_step = SearchConfig {
        model_steps: 1,
        ..cfg.clone()
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut losses = vec![0.0; tasks.len()];
        for _ in 0..cfg.model_steps {
            for (i, t) in tasks.iter().enumerate() {
                let s = model_phase(
                    &mut models[i],
                    &parts.controller,
                    &t.train,
                    &one_step,
                    None,
                    &mut adams[i],
                    &mut train_b[i],
                    &mut rngs[i],
                )?;
                losses[i] += s.mean_loss / cfg.model_steps as f64;
            }
        }
        let mut task_sums = vec![0.0; tasks.len()];
        let stats = controller_phase_with(&mut parts.controller, &mut parts.baseline, cfg, &mut ctrl_rng, |dags, _| {
            let mut per_task = Vec::with_capacity(tasks.len());
            for (i, t) in tasks.iter().enumerate() {
                let idx = val_b[i].next(cfg.reward_batch_size, &mut rngs[i].data);
                let batch: Vec<M::Example> = idx.iter().map(|&j| t.val[j].clone()).collect();
                let r = dags
                    .iter()
                    .map(|d| evaluate_dag(&models[i], d, &batch, metrics[i], cfg.eval_batch_size))
                    .collect::<Result<Vec<_>>>()?;
                task_sums[i] += r.iter().sum::<f64>();
                per_task.push(r);
            }
            (0..dags.len())
                .map(|s| joint_reward(&per_task.iter().map(|r| r[s]).collect::<Vec<_>>()))
                .collect()
        })?;
        let record = MasEpoch {
            epoch: epoch + 1,
            mean_joint_reward: stats.mean_reward,
            task_rewards: task_sums.iter().map(|s| s / cfg.controller_samples as f64).collect(),
            baseline: parts.baseline.ema,
            train_loss: losses,
        };
        log_record("mas", &record);
        history.push(record);
    }
    let mut derive_rng = stream(seed, "mas:derive");
    let (dag, joint_val, _) = derive_best_with(&parts.controller, cfg.derive_samples, &mut derive_rng, |d| {
        let s = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| evaluate_dag(&models[i], d, &t.val, metrics[i], cfg.eval_batch_size))
            .collect::<Result<Vec<_>>>()?;
        joint_reward(&s)
    })?;
    let task_val = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| evaluate_dag(&models[i], &dag, &t.val, metrics[i], cfg.eval_batch_size))
        .collect::<Result<Vec<_>>>()?;
    let result = MasResult {
        tasks: tasks.iter().map(|t| t.spec.name.clone()).collect(),
        dag: dag.to_json(),
        joint_val,
        task_val,
        history,
    };
    Ok((dag, result, models))
}

/// Retrains `dag` from scratch on a task it was not searched on; only the new
/// task's own parameters are trained.
pub fn transfer_eval<M: TaskModel>(
    build: impl Fn(&mut Rng) -> M,
    dag: &CellDag,
    task: &TaskDataset<M::Example>,
    cfg: &SearchConfig,
) -> Result<RetrainMetrics> {
    let model = build(&mut stream(cfg.seed, "retrain:init"));
    if model.num_nodes() != dag.num_nodes() {
        return Err(Error::contract(format!(
            "structure has {} nodes, model expects {}",
            dag.num_nodes(),
            model.num_nodes()
        )));
    }
    retrain(model, dag, task, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub cell: String,
    pub dag: serde_json::Value,
    pub val: f64,
    pub test: f64,
}

/// The comparison behind a multi-task run: a two-node all-tanh chain, each
/// single-task cell, and the multi-task cell, all retrained on the held-out task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasReport {
    pub search: MasResult,
    pub held_out: String,
    pub table: Vec<TransferRow>,
}

impl MasReport {
    pub fn row(&self, cell: &str) -> Option<&TransferRow> {
        self.table.iter().find(|r| r.cell == cell)
    }
}

/// Runs the full comparison. `build(nodes, rng)` makes a fresh model with the
/// given cell size. Single-task cells come from plain searches with the same
/// configuration.
pub fn mas_experiment<M: TaskModel>(
    build: impl Fn(usize, &mut Rng) -> M,
    tasks: &[TaskDataset<M::Example>],
    held_out: &TaskDataset<M::Example>,
    cfg: &SearchConfig,
) -> Result<MasReport> {
    let n = cfg.model.num_nodes;
    let (joint, search) = mas_search(|r| build(n, r), tasks, cfg)?;
    let mut cells: Vec<(String, CellDag)> = vec![("lstm-chain".into(), CellDag::chain(2, Activation::Tanh))];
    for (i, t) in tasks.iter().enumerate() {
        let single = SearchConfig {
            seed: cfg.seed.wrapping_add(1 + i as u64),
            ..cfg.clone()
        };
        let mut model = build(n, &mut stream(single.seed, "search:init"));
        let mut parts = SearchParts::new(n, &single.controller, single.seed);
        let res = crate::search::search_loop(&mut model, &mut parts, t, &single, None, &format!("single:{}", t.spec.name))?;
        cells.push((format!("task:{}", t.spec.name), res.best_dag));
    }
    cells.push(("multi-task".into(), joint));
    let table = cells
        .into_iter()
        .map(|(cell, dag)| {
            let m = transfer_eval(|r| build(dag.num_nodes(), r), &dag, held_out, cfg)?;
            Ok(TransferRow {
                cell,
                dag: dag.to_json(),
                val: m.val,
                test: m.test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MasReport {
        search,
        held_out: held_out.spec.name.clone(),
        table,
    })
}
