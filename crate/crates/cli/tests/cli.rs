use std::path::Path;
use std::process::{Command, Output};

use strgnn_core::synthetic::{generate_communities, CommunityConfig};

fn strgnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_strgnn"))
        .current_dir(dir)
        .env_remove("STRGNN_OUT_DIR")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line on stderr");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn with_data() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cg = generate_communities(&CommunityConfig { community_size: 15, snapshots: 8, seed: 4, ..Default::default() })
        .unwrap();
    let mut text = Vec::new();
    strgnn_core::graph::export_edges(&mut text, &cg.edges, &cg.nodes).unwrap();
    std::fs::write(dir.path().join("edges.txt"), text).unwrap();
    dir
}

const SMALL: [&str; 14] = [
    "--dataset", "edges.txt", "--snapshots", "8", "--partition", "equal-time", "--w", "2", "--epochs", "1",
    "--gcn-channels", "4,4", "--gru-hidden", "8",
];

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let help = strgnn(dir.path(), &["--help"]);
    assert!(help.status.success());
    assert!(String::from_utf8_lossy(&help.stdout).contains("evaluate"));
    assert!(strgnn(dir.path(), &["--version"]).status.success());
}

#[test]
fn usage_errors_exit_two_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["train", "--epoch", "3"][..], &["evaluate", "--dataset", "x"], &["frobnicate"], &["train", "--h", "one"]] {
        let out = strgnn(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = error_line(&out);
        assert_eq!(err["error"], "usage");
        assert_eq!(err["code"], 2);
    }
    let out = strgnn(dir.path(), &["evaluate", "--dataset", "x"]);
    assert!(error_line(&out)["message"].as_str().unwrap().contains("--checkpoint"));
}

#[test]
fn list_flags_outside_sweep_are_usage_errors() {
    let dir = with_data();
    let out = strgnn(dir.path(), &["train", "--dataset", "edges.txt", "--snapshots", "8", "--h", "1,2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_three() {
    let dir = with_data();
    std::fs::write(dir.path().join("bad.json"), r#"{"train": {"epoch": 2}}"#).unwrap();
    let out = strgnn(dir.path(), &["train", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "config");

    let out = strgnn(dir.path(), &["train", "--dataset", "edges.txt"]);
    assert_eq!(out.status.code(), Some(3), "snapshots is required");
    let out = strgnn(dir.path(), &["train", "--dataset", "edges.txt", "--snapshots", "8", "--train-ratio", "1.5"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn data_errors_exit_four() {
    let dir = with_data();
    let out = strgnn(dir.path(), &["ingest", "--dataset", "missing.txt"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("missing.txt"));

    std::fs::write(dir.path().join("broken.txt"), "a b 1\na b notatime\n").unwrap();
    let out = strgnn(dir.path(), &["ingest", "--dataset", "broken.txt"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("line 2"));

    let out = strgnn(dir.path(), &["evaluate", "--checkpoint", "edges.txt", "--dataset", "edges.txt"]);
    assert_eq!(out.status.code(), Some(4), "not a checkpoint");
}

#[test]
fn ingest_reports_counts_and_exports() {
    let dir = with_data();
    let out = strgnn(dir.path(), &["ingest", "--dataset", "edges.txt", "--snapshots", "8", "--export", "copy.txt"]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["nodes"], 30);
    assert_eq!(summary["snapshot_edges"].as_array().unwrap().len(), 8);
    let original = std::fs::read(dir.path().join("edges.txt")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("copy.txt")).unwrap(), original);
}

#[test]
fn config_file_keys_merge_under_flags() {
    let dir = with_data();
    std::fs::write(
        dir.path().join("run.json"),
        r#"{"dataset": "edges.txt", "train": {"snapshots": 8, "partition": "equal-time", "window": 2, "epochs": 1,
            "gcn_channels": [4, 4], "gru_hidden": 8, "seed": 3}}"#,
    )
    .unwrap();
    let out = strgnn(dir.path(), &["train", "--config", "run.json", "--seed", "7", "--out", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/train_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["train"]["seed"], 7);
    assert_eq!(summary["config"]["train"]["window"], 2);
    assert_eq!(summary["config"]["train"]["batch_size"], 32);
    let log = std::fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn output_dir_falls_back_to_environment() {
    let dir = with_data();
    let out = Command::new(env!("CARGO_BIN_EXE_strgnn"))
        .current_dir(dir.path())
        .env("STRGNN_OUT_DIR", "from-env")
        .args(["train", "-q"])
        .args(SMALL)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("from-env/model.ckpt").exists());
}

#[test]
fn train_inject_evaluate_and_score() {
    let dir = with_data();
    let run = |args: &[&str]| {
        let out = strgnn(dir.path(), args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    run(&[&["train", "--out", "run"][..], &SMALL].concat());
    run(&[&["inject", "--out", "run"][..], &SMALL].concat());
    let candidates = std::fs::read_to_string(dir.path().join("run/candidates.csv")).unwrap();
    assert!(candidates.starts_with("src,dst,snapshot,label"));
    assert!(candidates.lines().any(|l| l.ends_with(",1")));

    let out = run(&["evaluate", "--checkpoint", "run/model.ckpt", "--dataset", "edges.txt", "--candidates", "run/candidates.csv", "--out", "eval"]);
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(line["injected"], 0);
    for file in ["metrics.json", "roc.csv", "embedding.csv", "scores.csv"] {
        assert!(dir.path().join("eval").join(file).exists(), "{file}");
    }

    run(&["score", "--checkpoint", "run/model.ckpt", "--dataset", "edges.txt", "--candidates", "run/candidates.csv", "--out", "scored"]);
    let eval_rows = strgnn_core::eval::read_scores(dir.path().join("eval/scores.csv")).unwrap();
    let score_rows = strgnn_core::eval::read_scores(dir.path().join("scored/scores.csv")).unwrap();
    assert_eq!(eval_rows, score_rows);

    let out = strgnn(dir.path(), &["evaluate", "--checkpoint", "run/model.ckpt", "--dataset", "edges.txt", "--gru-hidden", "9"]);
    assert_eq!(out.status.code(), Some(3), "model shape is fixed by the checkpoint");
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = with_data();
    let out = strgnn(
        dir.path(),
        &[&["sweep", "--out", "sw", "--fraction", "0.05,0.1"][..], &SMALL, &["--h", "1,2,3"]].concat(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("hops,window,train_ratio,injection_fraction,auc,best_epoch"));
    assert_eq!(lines.count(), 6);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 6);
}

#[test]
fn cv_reports_each_fold() {
    let dir = with_data();
    let out = strgnn(dir.path(), &[&["cv", "--out", "cv", "--folds", "2", "--train-ratio", "0.9"][..], &SMALL].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("cv/cv.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn generate_writes_edges_and_communities() {
    let dir = tempfile::tempdir().unwrap();
    let out = strgnn(dir.path(), &["generate", "--community-size", "10", "--snapshots", "5", "--out", "g"]);
    assert!(out.status.success());
    let comm = std::fs::read_to_string(dir.path().join("g/communities.csv")).unwrap();
    assert_eq!(comm.lines().count(), 21);
    let ingest = strgnn(dir.path(), &["ingest", "--dataset", "g/edges.txt"]);
    assert!(ingest.status.success());
}
