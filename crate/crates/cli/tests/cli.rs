use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn small_config() -> Value {
    json!({
        "dataset": { "kind": "synthetic", "task": "two_clusters", "samples": 200, "noise": 0.3 },
        "network": {
            "input_shape": [2],
            "classes": 2,
            "stem": [{ "kind": "linear", "in_features": 2, "out_features": 8 }, { "kind": "relu" }],
            "blocks": [
                [{ "kind": "linear", "in_features": 8, "out_features": 8 }, { "kind": "relu" }],
                [{ "kind": "linear", "in_features": 8, "out_features": 8 }, { "kind": "relu" }]
            ],
            "classifier": [{ "kind": "linear", "in_features": 8, "out_features": 2 }]
        },
        "ensemble": { "heads": 3, "blocks_in_head": 1 },
        "sparsity": { "ratio": 0.5 },
        "train": {
            "optimizer": { "kind": "sgd", "momentum": 0.9 },
            "lr": 0.05,
            "batch_size": 16,
            "steps": 40,
            "eval_interval": 20,
            "topology": { "strategy": "set", "update_interval": 10 }
        },
        "seed": 1
    })
}

fn write_config(dir: &Path, cfg: &Value) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn trails(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trails")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_artifacts_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join("run");
    let res = trails(&["train", "--config", s(&cfg), "--out", s(&out), "--dump-disagreements"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["history.jsonl", "summary.csv", "checkpoint.ntck", "config.resolved.json", "disagreements.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let history = std::fs::read_to_string(out.join("history.jsonl")).unwrap();
    let steps: Vec<u64> = history
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, [20, 40]);

    let res = trails(&["eval", "--config", s(&cfg), "--checkpoint", s(&out.join("checkpoint.ntck"))]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(report["step"], 40);
    let last: Value = serde_json::from_str(history.lines().last().unwrap()).unwrap();
    assert_eq!(report["metrics"]["accuracy"], last["metrics"]["accuracy"]);
}

#[test]
fn invalid_sparsity_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["sparsity"]["ratio"] = json!(1.0);
    let path = write_config(dir.path(), &cfg);
    let res = trails(&["train", "--config", s(&path), "--out", s(&dir.path().join("run"))]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("sparsity.ratio"));
}

#[test]
fn unknown_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["train"]["learning_rate"] = json!(0.1);
    let path = write_config(dir.path(), &cfg);
    let res = trails(&["train", "--config", s(&path), "--out", s(&dir.path().join("run"))]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("learning_rate"));
}

#[test]
fn steps_beyond_the_extension_cap_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["train"]["base_steps"] = json!(20);
    cfg["train"]["steps"] = json!(41);
    let path = write_config(dir.path(), &cfg);
    let res = trails(&["train", "--config", s(&path), "--out", s(&dir.path().join("run"))]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("train.steps"));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join("run");
    assert!(trails(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let ckpt = out.join("checkpoint.ntck");
    let bytes = std::fs::read(&ckpt).unwrap();
    let cut = dir.path().join("cut.ntck");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let res = trails(&["eval", "--config", s(&cfg), "--checkpoint", s(&cut)]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("truncated"));
}

#[test]
fn resume_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join("run");
    assert!(trails(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let mut other = small_config();
    other["train"]["lr"] = json!(0.01);
    let other_path = dir.path().join("other.json");
    std::fs::write(&other_path, other.to_string()).unwrap();
    let ckpt = out.join("checkpoint.ntck");
    let res = trails(&["train", "--config", s(&other_path), "--out", s(&dir.path().join("r2")), "--resume", s(&ckpt)]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("hash"));
}

#[test]
fn heads_sweep_runs_the_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["train"]["steps"] = json!(20);
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("sweep");
    let res = trails(&[
        "sweep", "--config", s(&path), "--axis", "heads", "--values", "1,3,5", "--seeds", "3", "--workers", "2", "--out", s(&out),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let mut runs = 0;
    for h in [1, 3, 5] {
        for seed in 1..=3 {
            assert!(out.join(format!("heads-{h}/seed-{seed}/summary.csv")).exists());
            runs += 1;
        }
    }
    assert_eq!(runs, 9);
    let mut reader = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| &r[2] == "3"));
}

#[test]
fn divergence_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["train"]["optimizer"] = json!({ "kind": "sgd", "momentum": 0.0 });
    cfg["train"]["lr"] = json!(1e38);
    cfg["train"]["topology"] = json!({ "strategy": "static" });
    let path = write_config(dir.path(), &cfg);
    let res = trails(&["train", "--config", s(&path), "--out", s(&dir.path().join("run"))]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
}
