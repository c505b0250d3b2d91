use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn decomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decomp")).args(args).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("decomp-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn error_of(out: &Output) -> Value {
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("not JSON: {}", String::from_utf8_lossy(&out.stderr)));
    v["error"].clone()
}

#[test]
fn usage_errors_are_json() {
    let out = decomp(&["simulate", "--task", "mnist"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out)["code"], "usage");
    assert!(decomp(&["--help"]).status.success());
}

#[test]
fn missing_files_and_bad_overrides_fail_cleanly() {
    let err = error_of(&decomp(&["attribute", "--model", "/nonexistent/model.json", "--input", "/x"]));
    assert_eq!(err["code"], "io");
    assert!(err["message"].as_str().unwrap().contains("/nonexistent/model.json"));

    let err = error_of(&decomp(&["attribute"]));
    assert_eq!(err["code"], "invalid-config");

    let err = error_of(&decomp(&["simulate", "--task", "frequency", "--set", "no_equals"]));
    assert_eq!(err["code"], "invalid-config");

    let err = error_of(&decomp(&["simulate", "--task", "frequency", "--set", "n_datasets=\"many\""]));
    assert_eq!(err["code"], "invalid-config");
}

#[test]
fn config_file_kind_must_match_the_subcommand() {
    let dir = scratch("kind");
    let path = dir.join("c.json");
    fs::write(&path, r#"{"kind": "acd", "seed": 1}"#).unwrap();
    let err = error_of(&decomp(&["simulate", "--task", "frequency", "--config", path.to_str().unwrap()]));
    assert_eq!(err["code"], "invalid-config");
    fs::write(&path, r#"{"kind": "weather"}"#).unwrap();
    let err = error_of(&decomp(&["acd", "--config", path.to_str().unwrap()]));
    assert_eq!(err["code"], "unknown-kind");
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = scratch("overrides");
    let path = dir.join("c.json");
    fs::write(&path, r#"{"kind": "frequency-sim", "seed": 1, "params": {"n_datasets": 1, "epochs": 3, "n_samples": 200}}"#).unwrap();
    let out_dir = dir.join("out");
    let out = decomp(&["simulate", "--task", "frequency", "--config", path.to_str().unwrap(), "--seed", "4", "--set", "n_datasets=2", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let status: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(status["status"], "ok");
    assert_eq!(status["seed"], 4);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config"]["n_datasets"], 2);
    assert_eq!(metrics["config"]["n_samples"], 200);
    assert_eq!(metrics["config"]["seed"], 4);
    let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
}

#[test]
fn trained_model_feeds_the_analysis_subcommands() {
    let dir = scratch("pipeline");
    let base = dir.join("base");
    let out = decomp(&["train-cdep", "--out", base.to_str().unwrap(), "--set", "task=frequency", "--set", "task_size=100", "--set", "targets=none", "--epochs", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = base.join("model.json");
    let input = dir.join("x.json");
    let x: Vec<Vec<f64>> = vec![(0..16).map(|i| (i as f64 * 0.7).sin()).collect(), (0..16).map(|i| (i as f64 * 0.3).cos()).collect()];
    fs::write(&input, serde_json::to_string(&x).unwrap()).unwrap();
    let (m, xi) = (model.to_str().unwrap(), input.to_str().unwrap());

    let at = dir.join("at");
    assert!(decomp(&["attribute", "--model", m, "--input", xi, "--group", "0,5,9", "--class", "1", "--out", at.to_str().unwrap()]).status.success());
    let metrics: Value = serde_json::from_str(&fs::read_to_string(at.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["summary"]["class_index"], 1);
    assert_eq!(metrics["summary"]["group_size"], 3);

    let tr = dir.join("tr");
    assert!(decomp(&["trim", "--model", m, "--input", xi, "--out", tr.to_str().unwrap()]).status.success());
    assert_eq!(fs::read_to_string(tr.join("metrics.csv")).unwrap().lines().count(), 1 + 16);
    assert!(tr.join("trim_scores.svg").exists());

    let acd = dir.join("acd");
    assert!(decomp(&["acd", "--model", m, "--input", xi, "--out", acd.to_str().unwrap()]).status.success());
    let tree: Value = serde_json::from_str(&fs::read_to_string(acd.join("hierarchy.json")).unwrap()).unwrap();
    assert!(tree.is_array() || tree.is_object());
    assert!(acd.join("hierarchy.svg").exists());

    let bad = error_of(&decomp(&["acd", "--model", m, "--input", xi, "--adjacency", "image", "--out", acd.to_str().unwrap()]));
    assert_eq!(bad["code"], "invalid-config");
}
