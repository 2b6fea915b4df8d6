//! Command-line front end: every subcommand reads one JSON config, writes its
//! artifacts under `--out`, and reports failures as one JSON record on stderr.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use cellsearch::autodiff::checkpoint::Checkpoint;
use cellsearch::autodiff::ParamStore;
use cellsearch::cas::cas_run_with;
use cellsearch::cell::CellDag;
use cellsearch::gradsuite::gradient_suite;
use cellsearch::mas::{mas_experiment, mas_search_models};
use cellsearch::models::{AttnSeq2Seq, ModelConfig, PairClassifier, TaskModel};
use cellsearch::rng::{stream, Rng};
use cellsearch::search::{evaluate_dag, retrain_model, search_loop, SearchParts};
use cellsearch::tasks::{gen_task, write_jsonl, PairExample, SeqExample, TaskData, TaskDataset, TaskSpec};
use cellsearch::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

pub use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "cellsearch", version, about = "Recurrent cell search with continual and multi-task transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    out: PathBuf,
    /// Worker cap. All computation currently runs on one thread.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Search a cell on the first task, then retrain it from scratch.
    Search(Common),
    /// Retrain a given cell from scratch on the first task.
    Retrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dag: PathBuf,
    },
    /// Continual search over all tasks in order.
    Cas(Common),
    /// Multi-task search over all tasks, with transfer to `held_out` when set.
    Mas(Common),
    /// Evaluate a checkpoint with a given cell on the first task.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dag: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the Graphviz rendering of a cell.
    ExportDot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dag: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck(Common),
    /// Write every task's splits as line-delimited JSON.
    GenData(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Search(c) | Command::Cas(c) | Command::Mas(c) | Command::Gradcheck(c) | Command::GenData(c) => c,
            Command::Retrain { common, .. } | Command::Eval { common, .. } | Command::ExportDot { common, .. } => common,
        }
    }
}

/// Exit code for an error kind.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::Numeric { .. } => 3,
        Error::MissingInput(_) => 4,
        _ => 1,
    }
}

/// The machine-readable failure record printed on stderr.
pub fn error_record(e: &Error) -> serde_json::Value {
    let mut rec = json!({ "kind": e.kind(), "message": e.to_string(), "exit_code": exit_code(e) });
    match e {
        Error::Config { field, .. } => rec["field"] = json!(field),
        Error::Numeric { op, .. } => rec["op"] = json!(op),
        Error::MissingInput(p) => rec["path"] = json!(p.display().to_string()),
        _ => {}
    }
    json!({ "error": rec })
}

/// Runs one invocation and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let rec = json!({ "error": { "kind": "usage", "message": e.to_string(), "exit_code": 2 } });
            eprintln!("{rec}");
            return 2;
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            exit_code(&e)
        }
    }
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn open(common: &Common) -> Result<Self> {
        if common.threads == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        let (cfg, raw) = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let d = RunConfig::default();
                let raw = serde_json::to_string_pretty(&d)? + "\n";
                (d, raw)
            }
        };
        let cfg = match common.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        };
        let out = common.out.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let run = Run { cfg, out };
        run.write_text("config.json", &raw)?;
        run.write_json("resolved_config.json", &run.cfg)?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        self.write_text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn write_dag(&self, json_name: &str, dot_name: &str, dag: &CellDag) -> Result<()> {
        self.write_json(json_name, &dag.to_json())?;
        self.write_text(dot_name, &dag.to_dot())
    }

    fn checkpoint(&self, name: &str, stores: &[&ParamStore], meta: serde_json::Value) -> Result<()> {
        let path = self.path(&format!("checkpoints/{name}"));
        std::fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(&self.out, e))?;
        let ck = stores
            .iter()
            .fold(Checkpoint::new(0, serde_json::Value::Null, meta), |ck, s| ck.with_store(s));
        ck.save(&path)
    }

    fn model_config(&self, nodes: usize) -> ModelConfig {
        ModelConfig {
            num_nodes: nodes,
            ..self.cfg.search.model.clone()
        }
    }

    fn generate(&self, specs: &[TaskSpec], first_index: usize) -> Result<Vec<TaskData>> {
        specs
            .iter()
            .enumerate()
            .map(|(i, s)| gen_task(s, self.cfg.task_seed(first_index + i)))
            .collect()
    }

    /// One past the largest symbol over every configured task.
    fn vocab(&self) -> usize {
        self.cfg.tasks.iter().chain(&self.cfg.held_out).map(TaskSpec::vocab_end).max().unwrap_or(0)
    }
}

fn read_dag(path: &Path) -> Result<CellDag> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    CellDag::from_json(&v)
}

/// Tasks of one kind, ready for a model type.
enum Tasks {
    Pair(Vec<TaskDataset<PairExample>>),
    Seq(Vec<TaskDataset<SeqExample>>),
}

fn split_kind(data: Vec<TaskData>) -> Result<Tasks> {
    let mut pair = Vec::new();
    let mut seq = Vec::new();
    for d in data {
        match d {
            TaskData::Pair(t) => pair.push(t),
            TaskData::Seq(t) => seq.push(t),
        }
    }
    match (pair.is_empty(), seq.is_empty()) {
        (false, true) => Ok(Tasks::Pair(pair)),
        (true, false) => Ok(Tasks::Seq(seq)),
        _ => Err(Error::config("tasks", "all tasks must be of the same kind")),
    }
}

/// Calls `$body` with `$build: Fn(usize, &mut Rng) -> model` and `$tasks` bound
/// to the task list of the matching kind.
macro_rules! with_model {
    ($run:expr, $data:expr, |$build:ident, $tasks:ident| $body:expr) => {{
        let vocab = $run.vocab();
        match split_kind($data)? {
            Tasks::Pair($tasks) => {
                let $build = |n: usize, r: &mut Rng| PairClassifier::new(&$run.model_config(n), vocab, 2, r);
                $body
            }
            Tasks::Seq($tasks) => {
                let $build = |n: usize, r: &mut Rng| AttnSeq2Seq::new(&$run.model_config(n), vocab, vocab, r);
                $body
            }
        }
    }};
}

fn execute(cmd: &Command) -> Result<i32> {
    let run = Run::open(cmd.common())?;
    match cmd {
        Command::Search(_) => {
            let data = run.generate(run.cfg.require_tasks(1)?, 0)?;
            with_model!(run, data, |build, tasks| search(&run, build, &tasks[0]))?;
        }
        Command::Retrain { dag, .. } => {
            let dag = read_dag(dag)?;
            let data = run.generate(run.cfg.require_tasks(1)?, 0)?;
            with_model!(run, data, |build, tasks| retrain(&run, build, &dag, &tasks[0]))?;
        }
        Command::Eval { dag, checkpoint, .. } => {
            let dag = read_dag(dag)?;
            let ck = Checkpoint::load(checkpoint)?;
            let data = run.generate(run.cfg.require_tasks(1)?, 0)?;
            with_model!(run, data, |build, tasks| eval(&run, build, &dag, &ck, &tasks[0]))?;
        }
        Command::Cas(_) => {
            let data = run.generate(run.cfg.require_tasks(1)?, 0)?;
            with_model!(run, data, |build, tasks| cas(&run, build, &tasks))?;
        }
        Command::Mas(_) => {
            let specs = run.cfg.require_tasks(1)?;
            let mut data = run.generate(specs, 0)?;
            let held_out = run.cfg.held_out.is_some();
            if let Some(h) = &run.cfg.held_out {
                data.extend(run.generate(std::slice::from_ref(h), specs.len())?);
            }
            with_model!(run, data, |build, tasks| mas(&run, build, tasks, held_out))?;
        }
        Command::ExportDot { dag, .. } => {
            let dag = read_dag(dag)?;
            run.write_text("cell.dot", &dag.to_dot())?;
        }
        Command::Gradcheck(_) => {
            let report = gradient_suite(run.cfg.gradcheck.points, run.cfg.seed);
            for c in &report {
                println!(
                    "{:<22} points={:<4} max_rel_error={:.3e} {}",
                    c.op,
                    c.points,
                    c.max_rel_error,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            let ok = report.iter().all(|c| c.passed());
            run.write_json("metrics.json", &json!({ "passed": ok, "ops": report }))?;
            return Ok(if ok { 0 } else { 1 });
        }
        Command::GenData(_) => gen_data(&run)?,
    }
    Ok(0)
}

fn search<M: TaskModel>(run: &Run, build: impl Fn(usize, &mut Rng) -> M, data: &TaskDataset<M::Example>) -> Result<()> {
    let cfg = run.cfg.search_config();
    let n = cfg.model.num_nodes;
    let mut model = build(n, &mut stream(cfg.seed, "search:init"));
    let mut parts = SearchParts::new(n, &cfg.controller, cfg.seed);
    let res = search_loop(&mut model, &mut parts, data, &cfg, None, "search")?;
    let mut fresh = build(n, &mut stream(cfg.seed, "retrain:init"));
    let (retrain, curve) = retrain_model(&mut fresh, &res.best_dag, data, &cfg, None, "retrain")?;
    run.write_dag("best_dag.json", "cell.dot", &res.best_dag)?;
    run.write_json("search_history.json", &res.history)?;
    run.write_json(
        "metrics.json",
        &json!({
            "task": data.spec.name,
            "seed": cfg.seed,
            "search_best_val": res.best_val,
            "retrain": retrain,
            "retrain_curve": curve,
        }),
    )?;
    let meta = json!({ "kind": "model", "dag": res.best_dag.to_json() });
    run.checkpoint("model.ckpt", &[fresh.store()], meta)?;
    run.checkpoint("controller.ckpt", &[parts.controller.store()], json!({ "kind": "controller" }))
}

fn retrain<M: TaskModel>(
    run: &Run,
    build: impl Fn(usize, &mut Rng) -> M,
    dag: &CellDag,
    data: &TaskDataset<M::Example>,
) -> Result<()> {
    let cfg = run.cfg.search_config();
    let mut model = build(dag.num_nodes(), &mut stream(cfg.seed, "retrain:init"));
    let (metrics, curve) = retrain_model(&mut model, dag, data, &cfg, None, "retrain")?;
    run.write_dag("best_dag.json", "cell.dot", dag)?;
    run.write_json(
        "metrics.json",
        &json!({ "task": data.spec.name, "seed": cfg.seed, "retrain": metrics, "retrain_curve": curve }),
    )?;
    run.checkpoint("model.ckpt", &[model.store()], json!({ "kind": "model", "dag": dag.to_json() }))
}

fn eval<M: TaskModel>(
    run: &Run,
    build: impl Fn(usize, &mut Rng) -> M,
    dag: &CellDag,
    ck: &Checkpoint,
    data: &TaskDataset<M::Example>,
) -> Result<()> {
    let mut model = build(dag.num_nodes(), &mut stream(run.cfg.seed, "retrain:init"));
    ck.restore_into(model.store_mut())?;
    let metric = data.spec.metric();
    let chunk = run.cfg.search.eval_batch_size;
    let val = evaluate_dag(&model, dag, &data.val, metric, chunk)?;
    let test = evaluate_dag(&model, dag, &data.test, metric, chunk)?;
    run.write_json("metrics.json", &json!({ "task": data.spec.name, "metric": metric, "val": val, "test": test }))
}

fn cas<M: TaskModel>(run: &Run, build: impl Fn(usize, &mut Rng) -> M, tasks: &[TaskDataset<M::Example>]) -> Result<()> {
    let cfg = run.cfg.cas_config();
    let n = cfg.search.model.num_nodes;
    let (report, state) = cas_run_with(|r| build(n, r), tasks, &cfg, |state, _| {
        let k = state.step;
        run.write_dag(&format!("dag_{k}.json"), &format!("cell_{k}.dot"), &state.registry[&k])
    })?;
    let last = &state.registry[&state.step];
    run.write_text("cell.dot", &last.to_dot())?;
    run.write_json("cas_report.json", &report)?;
    let history: Vec<_> = report.diagnostics.iter().map(|d| json!({ "step": d.step, "history": d.history })).collect();
    run.write_json("search_history.json", &history)?;
    let drops: Vec<f64> = (0..tasks.len()).map(|j| report.drop(j)).collect();
    let test: Vec<Vec<f64>> = report.matrix.iter().map(|row| row.iter().map(|m| m.test).collect()).collect();
    run.write_json(
        "metrics.json",
        &json!({ "tasks": report.tasks, "seed": cfg.search.seed, "ablation": report.ablation, "test_matrix": test, "drop": drops }),
    )?;
    let mut heads = ParamStore::new();
    for (k, tensors) in &state.heads {
        for (i, t) in tensors.iter().enumerate() {
            heads.add(format!("head.{k}.{i}"), t.clone());
        }
    }
    let dags: BTreeMap<String, serde_json::Value> = state.registry.iter().map(|(k, d)| (k.to_string(), d.to_json())).collect();
    run.checkpoint("model.ckpt", &[state.model.store(), &heads], json!({ "kind": "cas", "dags": dags }))
}

fn mas<M: TaskModel>(
    run: &Run,
    build: impl Fn(usize, &mut Rng) -> M,
    mut tasks: Vec<TaskDataset<M::Example>>,
    with_held_out: bool,
) -> Result<()> {
    let cfg = run.cfg.search_config();
    let n = cfg.model.num_nodes;
    if with_held_out {
        let held = tasks.pop().expect("held-out task appended");
        let report = mas_experiment(&build, &tasks, &held, &cfg)?;
        let dag = CellDag::from_json(&report.search.dag)?;
        run.write_dag("best_dag.json", "cell.dot", &dag)?;
        run.write_json("mas_result.json", &report)?;
        run.write_json("search_history.json", &report.search.history)?;
        run.write_json(
            "metrics.json",
            &json!({
                "tasks": report.search.tasks,
                "seed": cfg.seed,
                "joint_val": report.search.joint_val,
                "task_val": report.search.task_val,
                "held_out": report.held_out,
                "transfer": report.table,
            }),
        )
    } else {
        let (dag, result, models) = mas_search_models(|r| build(n, r), &tasks, &cfg)?;
        run.write_dag("best_dag.json", "cell.dot", &dag)?;
        run.write_json("mas_result.json", &result)?;
        run.write_json("search_history.json", &result.history)?;
        run.write_json(
            "metrics.json",
            &json!({ "tasks": result.tasks, "seed": cfg.seed, "joint_val": result.joint_val, "task_val": result.task_val }),
        )?;
        for (t, m) in tasks.iter().zip(&models) {
            run.checkpoint(&format!("model_{}.ckpt", t.spec.name), &[m.store()], json!({ "kind": "model", "task": t.spec.name }))?;
        }
        Ok(())
    }
}

fn gen_data(run: &Run) -> Result<()> {
    let specs: Vec<TaskSpec> = run.cfg.tasks.iter().chain(&run.cfg.held_out).cloned().collect();
    if specs.is_empty() {
        return Err(Error::config("tasks", "needs at least 1 task(s), got 0"));
    }
    let mut manifest = Vec::new();
    for (i, data) in run.generate(&specs, 0)?.into_iter().enumerate() {
        let name = data.spec().name.clone();
        let dir = format!("data/{name}");
        std::fs::create_dir_all(run.path(&dir)).map_err(|e| Error::io(run.path(&dir), e))?;
        let (counts, balance) = match &data {
            TaskData::Pair(d) => {
                for (split, xs) in [("train", &d.train), ("val", &d.val), ("test", &d.test)] {
                    write_jsonl(&run.path(&format!("{dir}/{split}.jsonl")), xs)?;
                }
                let ones = d.train.iter().filter(|e| e.label == 1).count();
                ([d.train.len(), d.val.len(), d.test.len()], Some(ones as f64 / d.train.len() as f64))
            }
            TaskData::Seq(d) => {
                for (split, xs) in [("train", &d.train), ("val", &d.val), ("test", &d.test)] {
                    write_jsonl(&run.path(&format!("{dir}/{split}.jsonl")), xs)?;
                }
                ([d.train.len(), d.val.len(), d.test.len()], None)
            }
        };
        manifest.push(json!({
            "name": name,
            "seed": run.cfg.task_seed(i),
            "train": counts[0],
            "val": counts[1],
            "test": counts[2],
            "train_label_balance": balance,
        }));
    }
    run.write_json("metrics.json", &json!({ "tasks": manifest }))
}
