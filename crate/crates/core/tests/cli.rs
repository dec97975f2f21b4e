mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::config_path;

fn fedsmooth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsmooth"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn missing_config_exits_1_and_names_path() {
    let out = fedsmooth(&["run", "--config", "/definitely/not/here.json", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here.json"));
}

#[test]
fn unknown_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"num_clients": 2, "rounds": 1, "colour": "red",
            "model": {"kind": "softmax_regression", "input_dim": 4, "num_classes": 2}}"#,
    );
    let out = fedsmooth(&["run", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn runtime_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"num_clients": 2, "rounds": 1,
            "model": {"kind": "softmax_regression", "input_dim": 4, "num_classes": 2},
            "data": {"kind": "csv", "path": "missing.csv"}}"#,
    );
    let out = fedsmooth(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_writes_outputs_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let tiny = config_path("tiny.json");
    assert_eq!(
        fedsmooth(&["run", "--config", s(&tiny), "--out", s(&a)]).status.code(),
        Some(0)
    );
    assert_eq!(
        fedsmooth(&["run", "--config", s(&tiny), "--out", s(&b), "--jobs", "3"])
            .status
            .code(),
        Some(0)
    );
    for f in ["metrics.csv", "checkpoint.bin", "config.resolved.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 5 * (3 * 10 + 1));
    assert!(!metrics.contains('\r'));

    let resolved = a.join("config.resolved.json");
    assert_eq!(
        fedsmooth(&["run", "--config", s(&resolved), "--out", s(&c)])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(c.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(resolved).unwrap(),
        std::fs::read(c.join("config.resolved.json")).unwrap()
    );
}

#[test]
fn verify_passes_and_corruption_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_path("verify.json");
    let ok = fedsmooth(&["verify", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("max residual"));
    let report = std::fs::read_to_string(dir.path().join("discrepancy.csv")).unwrap();
    assert!(report.starts_with("round,client_id,layer,lhs_norm,rhs_norm,residual,bound_slack\n"));

    let bad = fedsmooth(&["verify", "--config", s(&cfg), "--out", s(dir.path()), "--corrupt-trace"]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn verify_rejects_method_without_round_matching() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"method": "fedavg_lora", "num_clients": 2, "rounds": 2,
            "model": {"kind": "softmax_regression", "input_dim": 4, "num_classes": 2}}"#,
    );
    let out = fedsmooth(&["verify", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_writes_six_rows_with_one_partition() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedsmooth(&[
        "ablate",
        "--config",
        s(&config_path("tiny.json")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let summary = std::fs::read_to_string(dir.path().join("ablation_summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    let hashes: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.rsplit(',').next().unwrap()).collect();
    assert_eq!(hashes.len(), 1);
    for m in [
        "fedsmooth",
        "fedsmooth_no_rm",
        "fedsmooth_no_ga",
        "fedavg_lora",
        "frlora_fresh",
        "fedsmooth_factor_avg",
    ] {
        assert!(dir.path().join(m).join("metrics.csv").exists(), "{m}");
    }
}

#[test]
fn partition_stats_counts_and_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let body = |partition: &str| {
        format!(
            r#"{{"num_clients": 5, "rounds": 1, "partition": {partition},
                "model": {{"kind": "softmax_regression", "input_dim": 4, "num_classes": 8}},
                "data": {{"kind": "synthetic", "samples": 1000}}}}"#
        )
    };
    let parse = |out: Output| -> (Vec<usize>, f64) {
        assert_eq!(out.status.code(), Some(0));
        let text = String::from_utf8(out.stdout).unwrap();
        let mut counts = Vec::new();
        let mut mean = 0.0;
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols[0] == "all" {
                assert_eq!(cols[1].parse::<usize>().unwrap(), counts.iter().sum::<usize>());
                mean = cols[2].parse().unwrap();
            } else {
                counts.push(cols[1].parse().unwrap());
            }
        }
        (counts, mean)
    };
    let iid = write_config(dir.path(), &body(r#"{"kind": "iid"}"#));
    let (counts, iid_entropy) = parse(fedsmooth(&["partition-stats", "--config", s(&iid)]));
    assert_eq!(counts, vec![200; 5]);
    let dir2 = tempfile::tempdir().unwrap();
    let skew = write_config(dir2.path(), &body(r#"{"kind": "dirichlet", "beta": 0.1}"#));
    let (counts, skew_entropy) = parse(fedsmooth(&["partition-stats", "--config", s(&skew)]));
    assert_eq!(counts.iter().sum::<usize>(), 1000);
    assert!(skew_entropy < iid_entropy);
}
