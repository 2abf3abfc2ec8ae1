use std::fs;
use std::path::Path;

use logcoral::cli::{self, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn run(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = cli::run(std::iter::once("logcoral").chain(args.iter().copied()), &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_input_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let r = run(&["losses", "--source", s(&missing), "--target", s(&missing)]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("nope.csv"), "{}", r.err);
}

#[test]
fn malformed_csv_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "1,2\n3,4\n5,x\n").unwrap();
    let r = run(&["losses", "--source", s(&bad), "--target", s(&bad)]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("bad.csv") && r.err.contains('3'), "{}", r.err);
}

#[test]
fn identical_files_have_zero_losses() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["generate", "--out", s(dir.path()), "--seed", "3"]).code, EXIT_OK);
    let src = dir.path().join("source.csv");
    let r = run(&["losses", "--source", s(&src), "--target", s(&src), "--labels", "--json"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let v: serde_json::Value = serde_json::from_str(r.out.trim()).unwrap();
    for key in ["coral", "logcoral", "mean"] {
        assert_eq!(v[key].as_f64(), Some(0.0), "{key}");
    }
    assert!(v["condition_source"].as_f64().unwrap() >= 1.0);
}

#[test]
fn shifted_files_have_positive_losses() {
    let dir = tempfile::tempdir().unwrap();
    run(&["generate", "--out", s(dir.path())]);
    let r = run(&[
        "losses",
        "--source",
        s(&dir.path().join("source.csv")),
        "--target",
        s(&dir.path().join("target.csv")),
        "--labels",
        "--format",
        "csv",
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let values: Vec<f64> = r.out.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(values[..3].iter().all(|v| *v > 0.0), "{values:?}");
}

#[test]
fn gradcheck_passes_and_detects_a_sign_error() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(&["gradcheck", "--out", s(dir.path()), "--trials", "3"]);
    assert_eq!(ok.code, EXIT_OK, "{}{}", ok.out, ok.err);
    assert!(ok.out.contains("logcoral") && !ok.out.contains("FAIL"));

    let bad = run(&["gradcheck", "--out", s(dir.path()), "--trials", "3", "--corrupt-target-sign"]);
    assert_eq!(bad.code, EXIT_FAILURE);
    let dump: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck_failure.json")).unwrap()).unwrap();
    assert!(!dump["failures"].as_array().unwrap().is_empty());
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&["train", "--out", s(dir.path()), "--steps", "40", "--warmup", "0", "--eval-every", "20", "--format", "json"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let lines: Vec<serde_json::Value> = fs::read_to_string(dir.path().join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 40);
    assert_eq!(lines[0]["step"], 1);
    for key in ["loss_cls", "loss_coral", "loss_logcoral", "loss_mean"] {
        assert!(lines[39][key].is_number(), "{key}");
    }
    assert!(lines[19]["target_acc"].is_number());
    assert!(lines[0].get("target_acc").is_none());
    assert!(dir.path().join("checkpoint.json").exists());
}

#[test]
fn metric_log_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert_eq!(run(&["train", "--out", s(d.path()), "--steps", "60", "--warmup", "30", "--seed", "4"]).code, EXIT_OK);
    }
    let read = |d: &tempfile::TempDir| fs::read(d.path().join("metrics.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "# short run\nsteps = 30\nseed = 2\nformat = json\n").unwrap();
    let r = run(&["train", "--config", s(&cfg), "--out", s(dir.path()), "--steps", "10", "--warmup", "0"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let v: serde_json::Value = serde_json::from_str(r.out.trim()).unwrap();
    assert_eq!(v["steps"], 10);
}

#[test]
fn csv_training_input() {
    let dir = tempfile::tempdir().unwrap();
    run(&["generate", "--out", s(dir.path()), "--samples-per-class", "30"]);
    let r = run(&[
        "train",
        "--out",
        s(dir.path()),
        "--steps",
        "20",
        "--warmup",
        "5",
        "--source-csv",
        s(&dir.path().join("source.csv")),
        "--target-csv",
        s(&dir.path().join("target.csv")),
        "--target-labels",
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.contains("target accuracy"));
}

#[test]
fn numerical_failure_saves_last_good_state() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&["train", "--out", s(dir.path()), "--steps", "200", "--warmup", "0", "--lr", "1e30", "--sgd-momentum", "0.9"]);
    assert_eq!(r.code, EXIT_FAILURE, "{}{}", r.out, r.err);
    assert!(r.err.contains("last good state"), "{}", r.err);
    let ckpt: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("checkpoint.json")).unwrap()).unwrap();
    assert!(ckpt["step"].as_u64().unwrap() < 200);
}

#[test]
fn ablate_reports_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(&[
        "ablate",
        "--steps",
        "20",
        "--warmup",
        "10",
        "--seeds",
        "2",
        "--shifts",
        "benchmark,translation",
        "--format",
        "csv",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let rows: Vec<&str> = r.out.lines().collect();
    assert_eq!(rows.len(), 1 + 6 * 2);
    for method in ["baseline", "coral", "logcoral", "mean", "coral+mean", "logcoral+mean"] {
        assert!(rows.iter().any(|l| l.starts_with(&format!("{method},"))), "{method}");
    }
    assert_eq!(fs::read_to_string(dir.path().join("ablation.csv")).unwrap(), r.out);
}
