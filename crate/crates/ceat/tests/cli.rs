//! End-to-end checks of the command-line interface: exit codes, JSON
//! output, and the artifacts a run leaves behind.

use std::path::Path;
use std::process::{Command, Output};

use ceat::config::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ceat"))
}

fn tiny_config(out: &Path) -> RunConfig {
    RunConfig {
        synthetic_classes: 4,
        synthetic_train_per_class: 16,
        synthetic_test_per_class: 8,
        image_size: 8,
        channels: 1,
        base_classes: 2,
        classes_per_task: 1,
        patch_size: 4,
        model_dim: 16,
        heads: 2,
        blocks: 2,
        mlp_ratio: 2,
        incremental_from: 1,
        epochs_base: 2,
        epochs_incremental: 2,
        batch_size: 8,
        seed: 11,
        output_dir: out.to_string_lossy().into_owned(),
        ..RunConfig::default()
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {:?} / stderr {:?}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

#[test]
fn train_eval_verify_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("out");
    let cfg_path = write_config(dir.path(), &tiny_config(&run_dir));

    let train = bin().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(train.status.success(), "train failed: {:?}", String::from_utf8_lossy(&train.stderr));
    let summary = stdout_json(&train);
    assert_eq!(summary["tasks"], 3);
    assert_eq!(summary["data_access_violations"], 0);
    assert!(run_dir.join("report.json").exists());
    assert!(run_dir.join("matrix.csv").exists());
    assert!(run_dir.join("accuracy_series.csv").exists());
    assert!(run_dir.join("checkpoint.json").exists());

    let eval = bin().args(["eval", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(eval.status.success());
    let scores = stdout_json(&eval);
    assert_eq!(scores["tasks_completed"], 3);
    assert_eq!(scores["per_task_accuracy"].as_array().unwrap().len(), 3);

    let verify = bin().args(["verify-absorb", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(verify.status.success(), "{:?}", String::from_utf8_lossy(&verify.stdout));
    let v = stdout_json(&verify);
    assert_eq!(v["ok"], true);
    assert_eq!(v["zero_branch_residual"], 0.0);

    let report = bin().args(["report", "--run-dir"]).arg(&run_dir).output().unwrap();
    assert!(report.status.success());
    assert_eq!(stdout_json(&report)["consistent"], true);
}

#[test]
fn staged_train_resumes_to_the_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let full_cfg = write_config(&dir.path().join("."), &tiny_config(&full_dir));
    let full = bin().args(["train", "--config"]).arg(&full_cfg).output().unwrap();
    assert!(full.status.success());

    let staged_dir = dir.path().join("staged");
    let staged_cfg = dir.path().join("staged.toml");
    std::fs::write(&staged_cfg, tiny_config(&staged_dir).to_toml().unwrap()).unwrap();
    let first = bin()
        .args(["train", "--stop-after", "1", "--config"])
        .arg(&staged_cfg)
        .output()
        .unwrap();
    assert!(first.status.success());
    assert_eq!(stdout_json(&first)["tasks"], 1);
    let second = bin().args(["train", "--resume", "--config"]).arg(&staged_cfg).output().unwrap();
    assert!(second.status.success());

    let a = stdout_json(&full);
    let b = stdout_json(&second);
    assert_eq!(a["average_incremental_accuracy"], b["average_incremental_accuracy"]);
    assert_eq!(a["average_forgetting"], b["average_forgetting"]);
}

#[test]
fn gradcheck_passes_and_reports_every_term() {
    let out = bin().args(["gradcheck"]).output().unwrap();
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["ok"], true);
    let terms = v["terms"].as_object().unwrap();
    for name in [
        "classification",
        "contrastive/normalized",
        "contrastive/raw",
        "feature_distill",
        "logit_distill",
        "pseudo_classification",
        "total",
    ] {
        assert!(terms.contains_key(name), "missing {name}");
    }
}

#[test]
fn impossible_tolerance_fails_with_exit_two() {
    let out = bin().args(["gradcheck", "--tolerance", "1e-30"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stdout_json(&out)["ok"], false);
}

#[test]
fn operational_errors_are_json_on_stderr_with_exit_one() {
    let out = bin().args(["train", "--config", "/nonexistent/nope.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("nope.toml"));

    let eval = bin()
        .args(["eval", "--checkpoint", "/nonexistent/ckpt.json"])
        .output()
        .unwrap();
    assert_eq!(eval.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&eval.stderr).unwrap();
    assert!(err["error"].is_string());
}

#[test]
fn tampered_matrix_is_flagged_inconsistent() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("out");
    let cfg_path = write_config(dir.path(), &tiny_config(&run_dir));
    let train = bin().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(train.status.success());

    let matrix_path = run_dir.join("matrix.csv");
    let text = std::fs::read_to_string(&matrix_path).unwrap();
    let mut lines: Vec<String> = text.lines().map(|l| l.to_string()).collect();
    let last = lines.last().unwrap().clone();
    let mut fields: Vec<&str> = last.split(',').collect();
    fields[1] = "0.123456";
    *lines.last_mut().unwrap() = fields.join(",");
    std::fs::write(&matrix_path, lines.join("\n") + "\n").unwrap();

    let report = bin().args(["report", "--run-dir"]).arg(&run_dir).output().unwrap();
    assert_eq!(report.status.code(), Some(2));
    assert_eq!(stdout_json(&report)["consistent"], false);
}
