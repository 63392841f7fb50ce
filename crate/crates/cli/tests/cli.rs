use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const SYNTHETIC: &[&str] = &["--format", "synthetic", "--synthetic-spread", "1.5"];

fn larnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_larnet")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = larnet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// `command` followed by `flags`.
fn with<'a>(flags: &[&'a str], command: &[&'a str]) -> Vec<&'a str> {
    command.iter().chain(flags).copied().collect()
}

fn json_line(s: &str) -> serde_json::Value {
    serde_json::from_str(s.lines().last().expect("a record")).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    let file = |name: &str| dir.path().join(name);
    let started = Instant::now();

    ok(&with(SYNTHETIC, &["pretrain", "--arch", "cnn-small", "--epochs", "4", "--out", out]));
    ok(&["init", "--model", p(&file("pretrain.larn")), "--out", out]);
    ok(&with(SYNTHETIC, &["train", "--mode", "lr", "--model", p(&file("init.larn")), "--epochs", "2", "--out", out]));
    ok(&with(
        SYNTHETIC,
        &["train", "--mode", "lar", "--model", p(&file("train-lr.larn")), "--epochs", "4", "--out", out],
    ));
    let export =
        json_line(&ok(&with(SYNTHETIC, &["export", "--model", p(&file("train-lar.larn")), "--k", "3", "--out", out])));
    assert_eq!(export["accuracies"].as_array().unwrap().len(), 3);

    let packed = json_line(&ok(&with(SYNTHETIC, &["eval", "--model", p(&file("export.larp")), "--out", out])));
    let reference = json_line(&ok(&with(
        SYNTHETIC,
        &["eval", "--model", p(&file("export.ref.larn")), "--seed", "77", "--out", out],
    )));
    assert_eq!(packed["path"], "packed");
    assert_eq!(reference["path"], "reference");
    assert_eq!(packed["accuracy"], reference["accuracy"]);
    let accuracy = packed["accuracy"].as_f64().unwrap();
    assert!(accuracy > 0.9, "accuracy {accuracy}");
    assert!(started.elapsed().as_secs() < 60, "{:?}", started.elapsed());

    for name in ["pretrain", "init", "train-lr", "train-lar", "export", "eval"] {
        assert!(file(&format!("{name}.config.json")).is_file(), "{name}");
    }
    let metrics = std::fs::read_to_string(file("train-lar.metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["stage"], "lar");
    }

    // a rerun from the snapshot reproduces the metrics exactly
    let rerun = tempfile::tempdir().unwrap();
    ok(&["replay", p(&file("train-lar.config.json")), "--out", p(rerun.path())]);
    assert_eq!(metrics, std::fs::read_to_string(rerun.path().join("train-lar.metrics.jsonl")).unwrap());
    assert_eq!(
        std::fs::read(file("train-lar.larn")).unwrap(),
        std::fs::read(rerun.path().join("train-lar.larn")).unwrap()
    );

    ok(&with(SYNTHETIC, &["diag", "--model", p(&file("train-lar.larn")), "--bins", "5", "--out", out]));
    let csv = std::fs::read_to_string(file("diag/weight_entropy_layer1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(file("diag/activation_entropy_layer0.csv").is_file());
}

#[test]
fn snapshot_expands_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    ok(&with(SYNTHETIC, &["pretrain", "--arch", "mlp-small", "--epochs", "1", "--out", out]));
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("pretrain.config.json")).unwrap()).unwrap();
    assert_eq!(cfg["command"], "pretrain");
    assert_eq!(cfg["train"]["mc_samples"], 2);
    assert_eq!(cfg["train"]["tau"], 1.2);
    assert_eq!(cfg["train"]["prob_decay"], 1e-12);
    assert_eq!(cfg["train"]["batch_size"], 64);
    assert_eq!(cfg["train"]["lr"], 0.01);
    assert_eq!(cfg["arch"], "mlp-small");
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    let missing = dir.path().join("missing");
    let cases: Vec<Vec<&str>> = vec![
        vec!["pretrain", "--format", "mnist", "--data", p(&missing), "--out", out],
        vec!["pretrain", "--format", "mnist", "--out", out],
        vec!["eval", "--model", p(&missing), "--format", "synthetic", "--out", out],
        with(SYNTHETIC, &["pretrain", "--tau", "0", "--out", out]),
        with(SYNTHETIC, &["pretrain", "--arch", "resnet-9000", "--out", out]),
        vec!["init", "--model", p(&missing), "--p-zero-lo", "0.9", "--p-zero-hi", "0.1", "--out", out],
        vec!["frobnicate"],
        vec!["bench", "--length", "0", "--out", out],
    ];
    for args in cases {
        let o = larnet(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn corrupt_model_is_invalid_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.larn");
    std::fs::write(&bad, b"LARN\x09\0\0\0").unwrap();
    let o = larnet(&with(SYNTHETIC, &["eval", "--model", p(&bad), "--out", p(dir.path())]));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unsupported version"));
}

#[test]
fn mismatched_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    ok(&with(SYNTHETIC, &["pretrain", "--arch", "mlp-small", "--epochs", "1", "--out", out]));
    let model = dir.path().join("pretrain.larn");
    let o = larnet(&with(SYNTHETIC, &["eval", "--model", p(&model), "--synthetic-shape", "1,4,4", "--out", out]));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_writes_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["bench", "--length", "64,4096", "--budget-ms", "5", "--out", p(dir.path())]);
    let lines: Vec<serde_json::Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|v| v["ns_per_call"].as_f64().unwrap() > 0.0));
    let file = std::fs::read_to_string(dir.path().join("bench.metrics.jsonl")).unwrap();
    assert_eq!(file.lines().count(), 4);
}
