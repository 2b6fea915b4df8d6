use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use cellsearch_cli::run;
use proptest::prelude::*;
use serde_json::{json, Value};

fn task(name: &str, rule: &str, offset: usize) -> Value {
    json!({ "name": name, "rule": rule, "vocab_size": 6, "vocab_offset": offset,
            "min_len": 3, "max_len": 6, "train": 120, "val": 40, "test": 40 })
}

fn tiny_config(tasks: Vec<Value>) -> Value {
    json!({
        "seed": 3,
        "tasks": tasks,
        "search": {
            "epochs": 1, "model_steps": 4, "controller_samples": 4, "controller_batch": 2,
            "derive_samples": 3, "retrain_epochs": 2, "batch_size": 16,
            "model": { "embed_dim": 6, "hidden": 6, "num_nodes": 3, "dropout": 0.1 }
        },
        "cas": { "finetune_epochs": 1 },
        "gradcheck": { "points": 2 }
    })
}

fn pair_tasks() -> Vec<Value> {
    vec![task("a", "shared-symbol", 0), task("b", "parity-of-target-count", 6)]
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn invoke(args: &[&str]) -> i32 {
    let argv: Vec<String> = std::iter::once("cellsearch").chain(args.iter().copied()).map(String::from).collect();
    run(argv)
}

fn run_cmd(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    invoke(&args)
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn files_under(root: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p.clone());
            }
            out.insert(p);
        }
    }
    out
}

#[test]
fn search_writes_every_artifact_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(pair_tasks()));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run_cmd("search", &cfg, &a, &[]), 0);
    for f in ["config.json", "metrics.json", "search_history.json", "best_dag.json", "cell.dot", "checkpoints/model.ckpt", "checkpoints/controller.ckpt"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    assert_eq!(read(&a.join("config.json")), read(&cfg));

    // Re-running from the stored config reproduces the metrics bit for bit.
    assert_eq!(run_cmd("search", &a.join("config.json"), &b, &["--threads", "1"]), 0);
    for f in ["metrics.json", "best_dag.json", "search_history.json", "checkpoints/model.ckpt"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs");
    }

    let c = dir.path().join("c");
    assert_eq!(run_cmd("search", &cfg, &c, &["--seed", "4"]), 0);
    assert_ne!(read(&a.join("metrics.json")), read(&c.join("metrics.json")));
}

#[test]
fn retrain_then_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(pair_tasks()));
    let dag = dir.path().join("dag.json");
    std::fs::write(&dag, r#"{"version":1,"num_nodes":2,"nodes":[{"index":1,"activation":"tanh"},{"index":2,"prev":1,"activation":"relu"}]}"#).unwrap();
    let rt = dir.path().join("rt");
    assert_eq!(run_cmd("retrain", &cfg, &rt, &["--dag", dag.to_str().unwrap()]), 0);
    let ev = dir.path().join("ev");
    let ck = rt.join("checkpoints/model.ckpt");
    assert_eq!(run_cmd("eval", &cfg, &ev, &["--dag", dag.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()]), 0);
    let r: Value = serde_json::from_slice(&read(&rt.join("metrics.json"))).unwrap();
    let e: Value = serde_json::from_slice(&read(&ev.join("metrics.json"))).unwrap();
    assert_eq!(r["retrain"]["val"], e["val"]);
    assert_eq!(r["retrain"]["test"], e["test"]);
}

#[test]
fn cas_on_three_tasks_emits_a_three_by_three_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let mut tasks = pair_tasks();
    tasks.push(task("c", "same-majority-symbol", 12));
    let cfg = write_config(dir.path(), &tiny_config(tasks));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run_cmd("cas", &cfg, &a, &[]), 0);
    let report: Value = serde_json::from_slice(&read(&a.join("cas_report.json"))).unwrap();
    let m = report["matrix"].as_array().unwrap();
    assert_eq!(m.len(), 3);
    for (k, row) in m.iter().enumerate() {
        assert_eq!(row.as_array().unwrap().len(), k + 1);
    }
    for k in 1..=3 {
        assert!(a.join(format!("dag_{k}.json")).exists());
    }
    assert_eq!(run_cmd("cas", &cfg, &b, &[]), 0);
    assert_eq!(read(&a.join("metrics.json")), read(&b.join("metrics.json")));
    assert_eq!(read(&a.join("cas_report.json")), read(&b.join("cas_report.json")));
}

#[test]
fn mas_with_a_held_out_task_reports_the_transfer_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(pair_tasks());
    cfg["held_out"] = task("c", "same-majority-symbol", 12);
    let cfg = write_config(dir.path(), &cfg);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run_cmd("mas", &cfg, &a, &[]), 0);
    let m: Value = serde_json::from_slice(&read(&a.join("metrics.json"))).unwrap();
    let cells: Vec<&str> = m["transfer"].as_array().unwrap().iter().map(|r| r["cell"].as_str().unwrap()).collect();
    assert_eq!(cells, ["lstm-chain", "task:a", "task:b", "multi-task"]);
    assert!(a.join("mas_result.json").exists());
    assert_eq!(run_cmd("mas", &cfg, &b, &[]), 0);
    assert_eq!(read(&a.join("metrics.json")), read(&b.join("metrics.json")));
}

#[test]
fn seq2seq_tasks_run_through_search() {
    let dir = tempfile::tempdir().unwrap();
    let t = json!({ "name": "copy", "rule": "copy", "vocab_size": 5, "min_len": 2, "max_len": 4,
                    "train": 60, "val": 20, "test": 20 });
    let cfg = write_config(dir.path(), &tiny_config(vec![t]));
    let out = dir.path().join("o");
    assert_eq!(run_cmd("search", &cfg, &out, &[]), 0);
    let m: Value = serde_json::from_slice(&read(&out.join("metrics.json"))).unwrap();
    assert_eq!(m["retrain"]["metric"], "exact-match");
}

#[test]
fn gradcheck_and_export_dot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(pair_tasks()));
    let out = dir.path().join("g");
    assert_eq!(run_cmd("gradcheck", &cfg, &out, &[]), 0);
    let m: Value = serde_json::from_slice(&read(&out.join("metrics.json"))).unwrap();
    assert_eq!(m["passed"], true);
    assert_eq!(m["ops"].as_array().unwrap().len(), 5);

    let dag = dir.path().join("dag.json");
    std::fs::write(&dag, r#"{"version":1,"num_nodes":1,"nodes":[{"index":1,"activation":"sigmoid"}]}"#).unwrap();
    let (d1, d2) = (dir.path().join("d1"), dir.path().join("d2"));
    assert_eq!(invoke(&["export-dot", "--dag", dag.to_str().unwrap(), "--out", d1.to_str().unwrap()]), 0);
    assert_eq!(invoke(&["export-dot", "--dag", dag.to_str().unwrap(), "--out", d2.to_str().unwrap()]), 0);
    assert_eq!(read(&d1.join("cell.dot")), read(&d2.join("cell.dot")));
    assert!(String::from_utf8(read(&d1.join("cell.dot"))).unwrap().contains("1: sigmoid"));
}

#[test]
fn gen_data_writes_jsonl_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(pair_tasks()));
    let out = dir.path().join("d");
    assert_eq!(run_cmd("gen-data", &cfg, &out, &[]), 0);
    let train = String::from_utf8(read(&out.join("data/a/train.jsonl"))).unwrap();
    assert_eq!(train.lines().count(), 120);
    let first: Value = serde_json::from_str(train.lines().next().unwrap()).unwrap();
    for k in ["s1", "s2", "label"] {
        assert!(first.get(k).is_some());
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out_s = out.to_str().unwrap();

    let missing = dir.path().join("nope.json");
    assert_eq!(invoke(&["search", "--config", missing.to_str().unwrap(), "--out", out_s]), 4);
    assert_eq!(invoke(&["export-dot", "--dag", missing.to_str().unwrap(), "--out", out_s]), 4);

    let mut bad = tiny_config(pair_tasks());
    bad["search"]["epochz"] = json!(1);
    let p = write_config(dir.path(), &bad);
    assert_eq!(run_cmd("search", &p, &out, &[]), 2);

    let mut bad = tiny_config(pair_tasks());
    bad["search"]["lr"] = json!(0.0);
    let p = write_config(dir.path(), &bad);
    assert_eq!(run_cmd("search", &p, &out, &[]), 2);

    let p = write_config(dir.path(), &tiny_config(pair_tasks()));
    assert_eq!(run_cmd("search", &p, &out, &["--threads", "0"]), 2);
    assert_eq!(invoke(&["frobnicate", "--out", out_s]), 2);

    let mut nan = tiny_config(pair_tasks());
    nan["search"]["lr"] = json!(1e300);
    nan["search"]["grad_clip"] = json!(1e300);
    let p = write_config(dir.path(), &nan);
    assert_eq!(run_cmd("search", &p, &out, &[]), 3);
}

#[test]
fn binary_prints_a_json_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cellsearch"))
        .args(["search", "--config", "/definitely/missing.json", "--out"])
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    let line = String::from_utf8(out.stderr).unwrap();
    let rec: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(rec["error"]["kind"], "missing_input");
    assert_eq!(rec["error"]["exit_code"], 4);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    /// Whatever the subcommand and seed, files appear only under `--out`, and a
    /// second run with the same seed gives the same metrics.
    #[test]
    fn writes_stay_inside_out_and_repeat_exactly(cmd in 0usize..4, seed in 0u64..1000) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), &tiny_config(pair_tasks()));
        let dag = dir.path().join("dag.json");
        std::fs::write(&dag, r#"{"version":1,"num_nodes":3,"nodes":[{"index":1,"activation":"tanh"},{"index":2,"prev":1,"activation":"relu"},{"index":3,"prev":1,"activation":"identity"}]}"#).unwrap();
        let before = files_under(dir.path());
        let seed_s = seed.to_string();
        let dag_s = dag.to_str().unwrap().to_string();
        let (name, extra): (&str, Vec<&str>) = match cmd {
            0 => ("gen-data", vec![]),
            1 => ("retrain", vec!["--dag", &dag_s]),
            2 => ("export-dot", vec!["--dag", &dag_s]),
            _ => ("gradcheck", vec![]),
        };
        let mut metrics = Vec::new();
        for run_dir in ["o1", "o2"] {
            let out = dir.path().join(run_dir);
            let mut args = vec!["--seed", seed_s.as_str()];
            args.extend(extra.iter().copied());
            prop_assert_eq!(run_cmd(name, &cfg, &out, &args), 0);
            let m = out.join("metrics.json");
            metrics.push(if m.exists() { read(&m) } else { read(&out.join("cell.dot")) });
        }
        prop_assert_eq!(&metrics[0], &metrics[1]);
        let o1 = dir.path().join("o1");
        let o2 = dir.path().join("o2");
        for p in files_under(dir.path()).difference(&before) {
            prop_assert!(p.starts_with(&o1) || p.starts_with(&o2), "stray write {}", p.display());
        }
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        let text = std::fs::read_to_string(&p).unwrap();
        if p.file_name().unwrap().to_str().unwrap().starts_with("chain") {
            let v: Value = serde_json::from_str(&text).unwrap();
            cellsearch::cell::CellDag::from_json(&v).unwrap();
        } else {
            cellsearch_cli::RunConfig::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        }
        n += 1;
    }
    assert!(n >= 5);
}
