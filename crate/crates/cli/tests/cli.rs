use std::path::Path;
use std::process::{Command, Output};

use mekf_core::dme::calibrate_thresholds;
use mekf_core::{DatasetConfig, ExperimentConfig};
use serde_json::Value;

fn mekf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mekf"))
        .args(args)
        .output()
        .expect("spawn mekf")
}

fn small_config(dir: &Path) -> String {
    let mut cfg = ExperimentConfig::default();
    if let DatasetConfig::Synthetic { generator } = &mut cfg.dataset {
        generator.trials = 10;
        generator.length = 50;
    }
    cfg.train.epochs = 2;
    cfg.run.seeds = vec![3, 4];
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_string_lossy().into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let res = mekf(&["generate", "--config", &cfg, "--out", path_str(out)]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    // Header plus 10 trials of 50 rows.
    let text = String::from_utf8(bytes).unwrap();
    assert_eq!(text.lines().count(), 1 + 10 * 50);
    assert!(text.starts_with("trial,t,x_0,x_1,intent\n"));
}

#[test]
fn invalid_field_exits_2_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc: Value = serde_json::from_str(&ExperimentConfig::default().to_json()).unwrap();
    doc["train"]["lr"] = Value::from(-1.0);
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, doc.to_string()).unwrap();
    let out = dir.path().join("out");
    for cmd in ["generate", "train", "bench"] {
        let res = mekf(&[cmd, "--config", path_str(&cfg), "--out-dir", path_str(&out)]);
        assert_eq!(res.status.code(), Some(2), "{cmd}");
        let stderr = String::from_utf8_lossy(&res.stderr);
        assert!(stderr.contains("train.lr"), "{stderr}");
        assert!(!out.exists(), "{cmd} left output behind");
    }
}

#[test]
fn unknown_cell_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let res = mekf(&["bench", "--config", &cfg, "--out-dir", path_str(&out), "--only", "nope"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn bench_only_runs_selected_cell_with_expected_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let res = mekf(&["bench", "--config", &cfg, "--out-dir", path_str(&out), "--only", "mekf_ema+dme"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let report: Value = serde_json::from_slice(&std::fs::read(out.join("results.json")).unwrap()).unwrap();
    for key in ["config_digest", "units", "seeds", "cells", "runs"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["seeds"], serde_json::json!([3, 4]));
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0]["cell"], "mekf_ema+dme");
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    for run in runs {
        for key in ["cell", "adapter", "dme", "seed", "mse", "mse_squared", "steps", "kappa_counts", "thresholds"] {
            assert!(run.get(key).is_some(), "missing run field {key}");
        }
        assert!(run.get("timing").is_none());
        assert!(run["thresholds"]["xi1"].is_number());
    }
    assert!(out.join("report.txt").exists());
    let timing: Value = serde_json::from_slice(&std::fs::read(out.join("timing.json")).unwrap()).unwrap();
    assert_eq!(timing.as_array().unwrap().len(), 2);

    let again = mekf(&["report", "--results", path_str(&out.join("results.json"))]);
    assert!(again.status.success());
    assert_eq!(again.stdout, std::fs::read(out.join("report.txt")).unwrap());
}

#[test]
fn calibration_matches_quantiles_of_dumped_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let res = mekf(&["calibrate", "--config", &cfg, "--out-dir", path_str(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let errors: Vec<f64> = std::fs::read_to_string(out.join("validation_errors.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.parse().unwrap())
        .collect();
    let cal: Value = serde_json::from_slice(&std::fs::read(out.join("calibration.json")).unwrap()).unwrap();
    assert_eq!(cal["validation_steps"].as_u64().unwrap() as usize, errors.len());
    let expected = calibrate_thresholds(&errors, 0.5, 0.999).unwrap();
    assert_eq!(cal["thresholds"]["xi1"].as_f64().unwrap(), expected.xi1);
    assert_eq!(cal["thresholds"]["xi2"].as_f64().unwrap(), expected.xi2);
}

#[test]
fn train_then_adapt_with_saved_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = mekf(&["train", "--config", &cfg, "--out-dir", path_str(out), "--seed", "9"]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    assert_eq!(std::fs::read(a.join("model.json")).unwrap(), std::fs::read(b.join("model.json")).unwrap());
    let trace = std::fs::read_to_string(a.join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 2);

    let model = a.join("model.json");
    let res = mekf(&["calibrate", "--config", &cfg, "--out-dir", path_str(&a), "--seed", "9", "--model", path_str(&model)]);
    assert!(res.status.success());
    let res = mekf(&[
        "adapt",
        "--config",
        &cfg,
        "--out-dir",
        path_str(&a),
        "--seed",
        "9",
        "--model",
        path_str(&model),
        "--calibration",
        path_str(&a.join("calibration.json")),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let log = std::fs::read_to_string(a.join("prediction_log.csv")).unwrap();
    assert!(log.starts_with("t,j,kappa,y_1_0,"));
    let result: Value = serde_json::from_slice(&std::fs::read(a.join("adapt_result.json")).unwrap()).unwrap();
    assert_eq!(result["steps"].as_u64().unwrap() as usize, log.lines().count() - 1);
}

#[test]
fn print_defaults_round_trips() {
    let res = mekf(&["--print-defaults"]);
    assert!(res.status.success());
    let cfg = ExperimentConfig::from_json(&String::from_utf8(res.stdout).unwrap()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}
