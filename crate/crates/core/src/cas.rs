//! Continual search over an ordered task list.
//!
//! Step 1 trains every parameter with the sparsity condition on the cell
//! matrices. Each later step freezes the consolidated parameters as a base,
//! trains only a zero-initialised delta under the sparsity and orthogonality
//! conditions, and folds the delta into the base when the step ends. Every step
//! keeps its own structure and output head so earlier tasks can be re-evaluated
//! with the current shared weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamId;
use crate::cell::CellDag;
use crate::error::{Error, Result};
use crate::models::TaskModel;
use crate::regularizers::{cas_regularizer, GroupOrientation, RegConfig};
use crate::rng::{stream, Rng};
use crate::search::{evaluate_dag, retrain_model, search_loop, EpochRecord, SearchConfig, SearchParts};
use crate::tasks::TaskDataset;
use crate::tensor::Tensor;

/// Which conditions are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no-conditions")]
    NoConditions,
    /// Sparsity of the delta only.
    #[serde(rename = "only-2.1")]
    OnlySparsity,
    /// Orthogonality only.
    #[serde(rename = "only-2.2")]
    OnlyOrtho,
    /// No conditions, and earlier tasks are evaluated with the latest structure.
    #[serde(rename = "no-conditions-foreign-dag")]
    ForeignDag,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoConditions,
        Ablation::OnlySparsity,
        Ablation::OnlyOrtho,
        Ablation::ForeignDag,
    ];

    /// Regularizer for 1-based `step`. The ablations concern the later-step
    /// conditions only: step 1 carries the sparsity term in every mode, so all
    /// modes share the same first step.
    pub fn reg_for_step(self, base: &RegConfig, step: usize) -> RegConfig {
        let mut cfg = base.clone();
        if step == 1 {
            return cfg;
        }
        match self {
            Ablation::Full => {}
            Ablation::NoConditions | Ablation::ForeignDag => {
                cfg.lambda_sparsity = 0.0;
                cfg.lambda_ortho = 0.0;
            }
            Ablation::OnlySparsity => cfg.lambda_ortho = 0.0,
            Ablation::OnlyOrtho => cfg.lambda_sparsity = 0.0,
        }
        cfg
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoConditions => "no-conditions",
            Ablation::OnlySparsity => "only-2.1",
            Ablation::OnlyOrtho => "only-2.2",
            Ablation::ForeignDag => "no-conditions-foreign-dag",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CasConfig {
    pub search: SearchConfig,
    pub reg: RegConfig,
    /// Epochs of fixed-structure training after each step's search.
    pub finetune_epochs: usize,
    pub ablation: Ablation,
    /// Start every step from a fresh controller instead of the previous one.
    pub reset_controller: bool,
}

impl Default for CasConfig {
    fn default() -> Self {
        Self {
            search: SearchConfig::default(),
            reg: RegConfig::default(),
            finetune_epochs: 5,
            ablation: Ablation::Full,
            reset_controller: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub val: f64,
    pub test: f64,
}

/// Penalty-side measurements of one step, taken before consolidation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    /// `Σ ‖θᵀψ‖²_F` over the penalised matrices (0 at step 1).
    pub ortho: f64,
    /// Sum of group norms of ψ (of θ at step 1).
    pub sparsity: f64,
    /// Fraction of penalised groups with norm below `1e-3`.
    pub sparse_group_fraction: f64,
    pub history: Vec<EpochRecord>,
    pub search_best_val: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CasReport {
    pub tasks: Vec<String>,
    pub ablation: Ablation,
    /// `matrix[k][j]`: task `j` evaluated after step `k` (0-based, `j ≤ k`).
    pub matrix: Vec<Vec<EvalMetrics>>,
    /// Metrics recorded when each step finished.
    pub stored: Vec<EvalMetrics>,
    pub dags: Vec<serde_json::Value>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl CasReport {
    /// Test-score drop of task `j` from its own step to the last step.
    pub fn drop(&self, j: usize) -> f64 {
        self.matrix[j][j].test - self.matrix.last().expect("non-empty")[j].test
    }
}

/// The continual-learning state around one model.
#[derive(Clone, Debug)]
pub struct CasState<M> {
    /// Completed steps.
    pub step: usize,
    pub model: M,
    pub registry: BTreeMap<usize, CellDag>,
    pub heads: BTreeMap<usize, Vec<Tensor>>,
    pub stored: BTreeMap<usize, EvalMetrics>,
}

impl<M: TaskModel> CasState<M> {
    pub fn new(model: M) -> Self {
        Self {
            step: 0,
            model,
            registry: BTreeMap::new(),
            heads: BTreeMap::new(),
            stored: BTreeMap::new(),
        }
    }

    fn shared_ids(&self) -> Vec<ParamId> {
        let heads = self.model.head_ids();
        self.model.store().ids().filter(|id| !heads.contains(id)).collect()
    }

    /// Frozen bases by name.
    pub fn frozen(&self) -> BTreeMap<String, Tensor> {
        self.model
            .store()
            .iter()
            .filter_map(|(_, p)| p.base.clone().map(|b| (p.name.clone(), b)))
            .collect()
    }

    /// Trainable deltas of every parameter that has a base.
    pub fn deltas(&self) -> BTreeMap<String, Tensor> {
        self.model
            .store()
            .iter()
            .filter(|(_, p)| p.base.is_some())
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Folds each delta into its base (`θ_k = θ_{k−1} + ψ_k`), or turns plain
    /// shared parameters into bases, and resets the deltas to zero. Heads are
    /// left alone.
    pub fn consolidate(&mut self) {
        for id in self.shared_ids() {
            let p = self.model.store_mut().get_mut(id);
            let (r, c) = p.value.shape();
            let delta = std::mem::replace(&mut p.value, Tensor::zeros(r, c));
            p.base = Some(match p.base.take() {
                Some(mut base) => {
                    base.add_assign(&delta);
                    base
                }
                None => delta,
            });
        }
    }

    pub fn zero_deltas(&mut self) {
        for id in self.shared_ids() {
            let p = self.model.store_mut().get_mut(id);
            if p.base.is_some() {
                let (r, c) = p.value.shape();
                p.value = Tensor::zeros(r, c);
            }
        }
    }

    /// Fails if any base disagrees in shape with its delta.
    pub fn check_shapes(&self) -> Result<()> {
        for (_, p) in self.model.store().iter() {
            if let Some(b) = &p.base {
                if b.shape() != p.value.shape() {
                    return Err(Error::contract(format!(
                        "`{}` changed shape between steps: base {:?}, delta {:?}",
                        p.name,
                        b.shape(),
                        p.value.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    fn save_head(&mut self, step: usize) {
        let head = self.model.head_ids().iter().map(|&id| self.model.store().value(id).clone()).collect();
        self.heads.insert(step, head);
    }

    /// A copy of the current model wearing step `j`'s head.
    fn with_head(&self, j: usize) -> Result<M> {
        let head = self
            .heads
            .get(&j)
            .ok_or_else(|| Error::contract(format!("no head stored for step {j}")))?;
        let mut m = self.model.clone();
        for (&id, t) in m.head_ids().iter().zip(head) {
            m.store_mut().set_value(id, t.clone());
        }
        Ok(m)
    }

    /// Task `j` (1-based step) under the current shared weights, its stored
    /// head, and its registered structure (or `dag` when given).
    pub fn eval_step(
        &self,
        j: usize,
        task: &TaskDataset<M::Example>,
        dag: Option<&CellDag>,
        chunk: usize,
    ) -> Result<EvalMetrics> {
        let own = self
            .registry
            .get(&j)
            .ok_or_else(|| Error::contract(format!("no structure registered for step {j}")))?;
        let dag = dag.unwrap_or(own);
        let m = self.with_head(j)?;
        let metric = task.spec.metric();
        Ok(EvalMetrics {
            val: evaluate_dag(&m, dag, &task.val, metric, chunk)?,
            test: evaluate_dag(&m, dag, &task.test, metric, chunk)?,
        })
    }

    /// Search and fine-tune the next step on `task`; the delta stays unconsolidated.
    pub fn train_next(
        &mut self,
        parts: &mut SearchParts,
        task: &TaskDataset<M::Example>,
        cfg: &CasConfig,
    ) -> Result<StepDiagnostics> {
        self.check_shapes()?;
        let k = self.step + 1;
        if k > 1 {
            self.model.reinit_head(cfg.search.model.init_scale, &mut stream(cfg.search.seed, &format!("cas:head:{k}")));
        }
        let reg = cfg.ablation.reg_for_step(&cfg.reg, k);
        reg.validate()?;
        let label = format!("cas:{k}");
        let search = search_loop(&mut self.model, parts, task, &cfg.search, Some(&reg), &label)?;
        let ft = SearchConfig {
            retrain_epochs: cfg.finetune_epochs,
            ..cfg.search.clone()
        };
        retrain_model(&mut self.model, &search.best_dag, task, &ft, Some(&reg), &format!("{label}:finetune"))?;
        let (ortho, sparsity, frac) = self.penalty_diagnostics(&cfg.reg)?;
        self.registry.insert(k, search.best_dag.clone());
        self.save_head(k);
        self.step = k;
        let m = self.eval_step(k, task, None, cfg.search.eval_batch_size)?;
        self.stored.insert(k, m);
        Ok(StepDiagnostics {
            step: k,
            ortho,
            sparsity,
            sparse_group_fraction: frac,
            history: search.history,
            search_best_val: search.best_val,
        })
    }

    /// `(Σ‖θᵀψ‖², Σ group norms, fraction of near-zero groups)` over the
    /// matrices matched by `reg.patterns`. At step 1 the groups are those of θ.
    pub fn penalty_diagnostics(&self, reg: &RegConfig) -> Result<(f64, f64, f64)> {
        let store = self.model.store();
        let ids = store.matching(&reg.patterns);
        let mut frozen = BTreeMap::new();
        let mut params = BTreeMap::new();
        let (mut small, mut total) = (0usize, 0usize);
        for id in ids {
            let p = store.get(id);
            if let Some(b) = &p.base {
                frozen.insert(p.name.clone(), b.clone());
            }
            params.insert(p.name.clone(), p.value.clone());
            let g = match reg.orientation {
                GroupOrientation::Output => p.value.clone(),
                GroupOrientation::Input => p.value.transpose(),
            };
            for r in 0..g.rows() {
                let n = g.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                total += 1;
                small += usize::from(n < 1e-3);
            }
        }
        let unit = RegConfig {
            lambda_sparsity: 1.0,
            lambda_ortho: 1.0,
            ..reg.clone()
        };
        let terms = cas_regularizer((!frozen.is_empty()).then_some(&frozen), &params, &unit)?;
        let frac = if total == 0 { 0.0 } else { small as f64 / total as f64 };
        Ok((terms.ortho, terms.sparsity, frac))
    }
}

/// A run in progress: the state, the controller that carries across steps, and the report so far.
#[derive(Clone, Debug)]
pub struct CasRun<M> {
    pub state: CasState<M>,
    pub parts: SearchParts,
    pub report: CasReport,
}

impl<M: TaskModel> CasRun<M> {
    pub fn start(build: impl Fn(&mut Rng) -> M, tasks: &[TaskDataset<M::Example>], cfg: &CasConfig) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::contract("continual search needs at least one task"));
        }
        cfg.search.validate()?;
        cfg.reg.validate()?;
        let seed = cfg.search.seed;
        let state = CasState::new(build(&mut stream(seed, "cas:init")));
        let parts = SearchParts::new(state.model.num_nodes(), &cfg.search.controller, seed);
        let report = CasReport {
            tasks: tasks.iter().map(|t| t.spec.name.clone()).collect(),
            ablation: cfg.ablation,
            matrix: Vec::new(),
            stored: Vec::new(),
            dags: Vec::new(),
            diagnostics: Vec::new(),
        };
        Ok(Self { state, parts, report })
    }

    pub fn done(&self, tasks: &[TaskDataset<M::Example>]) -> bool {
        self.state.step >= tasks.len()
    }

    /// Trains, consolidates and evaluates the next task. `cfg` may differ from
    /// the one used for earlier steps (a run can branch into ablations after
    /// a shared first step).
    pub fn advance(&mut self, tasks: &[TaskDataset<M::Example>], cfg: &CasConfig) -> Result<()> {
        let i = self.state.step;
        let task = tasks
            .get(i)
            .ok_or_else(|| Error::contract(format!("no task left for step {}", i + 1)))?;
        self.report.ablation = cfg.ablation;
        if cfg.reset_controller && i > 0 {
            let seed = cfg.search.seed.wrapping_add(i as u64);
            self.parts = SearchParts::new(self.state.model.num_nodes(), &cfg.search.controller, seed);
        }
        let diag = self.state.train_next(&mut self.parts, task, cfg)?;
        self.state.consolidate();
        let k = self.state.step;
        let latest = self.state.registry[&k].clone();
        let foreign = (cfg.ablation == Ablation::ForeignDag).then_some(&latest);
        let row = tasks[..k]
            .iter()
            .enumerate()
            .map(|(j, t)| self.state.eval_step(j + 1, t, foreign, cfg.search.eval_batch_size))
            .collect::<Result<Vec<_>>>()?;
        self.report.matrix.push(row);
        self.report.stored.push(self.state.stored[&k]);
        self.report.dags.push(latest.to_json());
        self.report.diagnostics.push(diag);
        Ok(())
    }
}

/// Runs every task in order. `on_step` sees the state after each step's
/// consolidation and evaluation.
pub fn cas_run_with<M: TaskModel>(
    build: impl Fn(&mut Rng) -> M,
    tasks: &[TaskDataset<M::Example>],
    cfg: &CasConfig,
    mut on_step: impl FnMut(&CasState<M>, &CasReport) -> Result<()>,
) -> Result<(CasReport, CasState<M>)> {
    let mut run = CasRun::start(build, tasks, cfg)?;
    while !run.done(tasks) {
        run.advance(tasks, cfg)?;
        on_step(&run.state, &run.report)?;
    }
    Ok((run.report, run.state))
}

pub fn cas_run<M: TaskModel>(
    build: impl Fn(&mut Rng) -> M,
    tasks: &[TaskDataset<M::Example>],
    cfg: &CasConfig,
) -> Result<(CasReport, CasState<M>)> {
    cas_run_with(build, tasks, cfg, |_, _| Ok(()))
}
