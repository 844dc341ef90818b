use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/planted/config.json")
}

fn failmass(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_failmass")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn optimize_then_eval_then_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let cfg = fixture();
    let cfg = cfg.to_str().unwrap();
    let v = stdout_json(&failmass(&["optimize", "--config", cfg, "--out", run_dir.to_str().unwrap()]));
    let rounds = v["rounds"].as_u64().unwrap();
    assert!(rounds >= 1);
    assert!(v["final_scores"]["train"].as_f64().unwrap() >= 0.9);
    for f in ["report.json", "graph_initial.json", "graph_final.json", "e0_trajectory.csv", "cluster_metrics.csv"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    let e0 = std::fs::read_to_string(run_dir.join("e0_trajectory.csv")).unwrap();
    assert_eq!(e0.lines().count() as u64, 2 + rounds + 1);

    // Re-evaluating the final graph reproduces the reported scores.
    let report = run_dir.join("report.json");
    let ev = stdout_json(&failmass(&[
        "eval",
        "--graph",
        run_dir.join("graph_final.json").to_str().unwrap(),
        "--config",
        cfg,
        "--report",
        report.to_str().unwrap(),
    ]));
    assert_eq!(ev["train"], v["final_scores"]["train"]);
    assert_eq!(ev["validation"], v["final_scores"]["validation"]);
    assert_eq!(ev["e0_accuracy"], *v["e0_trajectory"].as_array().unwrap().last().unwrap());

    let cl_dir = dir.path().join("cluster");
    let cl = stdout_json(&failmass(&[
        "cluster",
        "--pool",
        run_dir.join("pools/round_01.jsonl").to_str().unwrap(),
        "--config",
        cfg,
        "--out",
        cl_dir.to_str().unwrap(),
    ]));
    assert!(cl["signatures"].as_u64().unwrap() > 0);
    assert!(cl["mode"].as_str().unwrap().starts_with("node="));
    assert!(std::fs::read_dir(&cl_dir).unwrap().count() > 0);
}

#[test]
fn seed_and_budget_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture();
    let out = dir.path().join("one");
    let v = stdout_json(&failmass(&[
        "optimize",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--max-iters",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(v["rounds"], 1);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["hyperparams"]["seed"], 3);
    assert_eq!(report["hyperparams"]["t_max"], 1);
}

#[test]
fn oracle_writes_sweep_and_descent() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&failmass(&["oracle", "--out", dir.path().to_str().unwrap(), "--kernels", "20", "--grid", "32"]));
    assert_eq!(v["kernels"], 20);
    assert_eq!(v["holds"], v["applicable"]);
    assert!(v["min_slack"].as_f64().unwrap() >= -1e-9);
    // Menu is identity then the 0.30/0.15/0.05 clearing kernels.
    assert_eq!(v["descent"]["chosen"], serde_json::json!([1, 2, 3]));
    for f in ["mass_bound_sweep.csv", "descent.csv", "density.csv"] {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert!(text.starts_with("# schema_version=1\n"), "{f}");
    }
    let sweep = std::fs::read_to_string(dir.path().join("mass_bound_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 22);
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = failmass(&["optimize", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("nope.json"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"dataset": "d", "graph": "g", "backend": {"type": "simulated", "world": "w"}, "extra": 1}"#).unwrap();
    let out = failmass(&["optimize", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}
