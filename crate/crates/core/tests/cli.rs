//! End-to-end runs of the `dualfer` binary on a small fixture.

use std::path::Path;
use std::process::{Command, Output};

fn dualfer(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualfer"))
        .args(args)
        .env("DUALFER_RUN_ROOT", root.join("runs"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

const SMALL: [&str; 4] = ["--set", "model.shufflenet.input_size=48", "--set", "model.efficientvit.input_size=48"];

#[test]
fn fixture_train_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("fx");
    let data_s = data.to_str().unwrap();
    let out = ok(&dualfer(tmp.path(), &["fixture", "--out", data_s, "--per-class", "4", "--size", "48"]));
    assert!(out.contains("wrote 24 images"), "{out}");

    let run = tmp.path().join("train");
    let mut args = vec![
        "train", "--data", data_s, "--epochs", "2", "--batch-size", "8", "--no-augment", "--run-dir",
        run.to_str().unwrap(), "--set", "split.protocol=\"none\"",
    ];
    args.extend(SMALL);
    let out = ok(&dualfer(tmp.path(), &args));
    assert!(out.contains("trained 2 epochs"), "{out}");
    for f in ["history.csv", "best.ckpt", "last.ckpt", "report.json", "confusion.csv", "manifest.json", "config.toml"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    // protocol none validates on every image, so eval on the validation split
    // must reproduce the accuracy stored with best.ckpt
    let ckpt = run.join("best.ckpt");
    let out = ok(&dualfer(tmp.path(), &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--split", "val"]));
    assert!(out.contains("(reproduced exactly)"), "{out}");

    let out = ok(&dualfer(tmp.path(), &["report", "--input", run.to_str().unwrap(), "--csv"]));
    assert!(out.contains("24 samples"), "{out}");
}

#[test]
fn profile_writes_latency_json() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("prof");
    let out = ok(&dualfer(
        tmp.path(),
        &["profile", "--runs", "4", "--warmup", "2", "--backbones", "shufflenet", "--run-dir", run.to_str().unwrap()],
    ));
    assert!(out.contains("4 runs after 2 warmup"), "{out}");
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("latency.json")).unwrap()).unwrap();
    let stats = &doc["stats"];
    assert_eq!(stats["samples_ms"].as_array().unwrap().len(), 4);
    assert_eq!(stats["warmup_runs"], 2);
    let (mean, min, max) = (
        stats["mean_ms"].as_f64().unwrap(),
        stats["min_ms"].as_f64().unwrap(),
        stats["max_ms"].as_f64().unwrap(),
    );
    assert!(min <= mean && mean <= max);
}

#[test]
fn crossval_writes_fold_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("fx");
    ok(&dualfer(tmp.path(), &["fixture", "--out", data.to_str().unwrap(), "--per-class", "2", "--size", "48"]));
    let mut args = vec!["crossval", "--k", "2", "--data", data.to_str().unwrap(), "--epochs", "1", "--batch-size", "6"];
    args.extend(SMALL);
    let out = ok(&dualfer(tmp.path(), &args));
    assert!(out.contains("2-fold mean accuracy"), "{out}");
    let runs: Vec<_> = std::fs::read_dir(tmp.path().join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let dir = &runs[0];
    assert!(dir.file_name().unwrap().to_str().unwrap().ends_with("-crossval"));
    assert!(dir.join("crossval.json").is_file());
    for f in 0..2 {
        assert!(dir.join(format!("fold-{f}")).join("report.json").is_file());
    }
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = dualfer(tmp.path(), &["train", "--data", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(missing.to_str().unwrap()));
    let out = dualfer(tmp.path(), &["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = dualfer(tmp.path(), &["report"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_prints_the_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&dualfer(tmp.path(), &["report", "--params"]));
    assert!(out.contains("fused model") && out.contains("5819865"), "{out}");
}
