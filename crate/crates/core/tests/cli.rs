use std::fs;
use std::process::Command;

use serde_json::{json, Value};

fn semfed() -> Command {
    Command::new(env!("CARGO_BIN_EXE_semfed"))
}

fn config() -> Value {
    json!({
        "model": { "kind": "linear-regression", "input_dim": 3 },
        "data": { "num_samples": 300, "noise_std": 0.1 },
        "partition": { "num_clients": 3, "alpha": 1.0 },
        "training": { "rounds": 4, "local_epochs": 1, "client_sample_rate": 1.0, "learning_rate": 0.1, "batch_size": 8 },
        "variants": [{ "kind": "scfa" }, { "kind": "centralized" }],
        "seeds": [1]
    })
}

fn error_record(stderr: &[u8]) -> Value {
    let text = String::from_utf8_lossy(stderr);
    let line = text.lines().rev().find(|l| l.trim_start().starts_with('{')).expect("JSON error record on stderr");
    serde_json::from_str(line).unwrap()
}

#[test]
fn missing_field_exits_nonzero_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config();
    cfg["training"].as_object_mut().unwrap().remove("learning_rate");
    let path = dir.path().join("cfg.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = semfed().args(["run", "--config"]).arg(&path).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out.stderr);
    assert_eq!(rec["error"], "config");
    assert_eq!(rec["field"], "training.learning_rate");
}

#[test]
fn run_fit_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, config().to_string()).unwrap();
    let out_dir = dir.path().join("o");
    let run = semfed().args(["run", "--config"]).arg(&path).arg("--out").arg(&out_dir).args(["--seed-override", "9"]).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let rounds = fs::read_to_string(out_dir.join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 1 + 2 * 4);
    assert!(rounds.lines().skip(1).all(|l| l.split(',').nth(1) == Some("9")));

    let fit = semfed().args(["fit", "zones"]).arg(&out_dir).output().unwrap();
    assert!(fit.status.success());
    let report: Value = serde_json::from_slice(&fs::read(out_dir.join("fit_zones.json")).unwrap()).unwrap();
    assert_eq!(report["inputs"]["rows"], json!(8));

    let report = semfed().arg("report").arg(&out_dir).output().unwrap();
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("centralized"));
}

#[test]
fn missing_rounds_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = semfed().args(["fit", "convergence"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out.stderr)["error"], "io");
}

#[test]
fn bad_schema_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("rounds.csv"), "variant,seed\nscfa,1\n").unwrap();
    let out = semfed().args(["fit", "convergence"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out.stderr);
    assert_eq!(rec["error"], "schema");
    assert_eq!(rec["column"], "round");
}
