use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};
use sigma_cli::ablate::run_ablation;
use sigma_cli::gradcheck::{default_cases, run_cases, GradCase, DEFAULT_INSTANCES, DEFAULT_TOLERANCE};
use sigma_cli::{ExperimentConfig, EXIT_CONFIG, EXIT_FAILURE};
use sigma_core::baselines::Method;
use sigma_core::train::{TaskConfig, TrainConfig};
use sigma_core::vit::VitConfig;

fn small_config() -> ExperimentConfig {
    let backbone = VitConfig { depth: 2, d: 32, heads: 2, image_hw: (16, 16), ..VitConfig::toy() };
    let mut cfg = ExperimentConfig {
        backbone,
        method: Method::Sigma { r: 8, modulation: true, fusion: true },
        train: TrainConfig { steps: 4, batch: 2, log_every: 2, ..TrainConfig::default() },
        task: TaskConfig { image_hw: (16, 16), radii: vec![2, 4, 6], train_size: 8, eval_size: 2, ..TaskConfig::shifted_multiscale() },
        ..ExperimentConfig::default()
    };
    cfg.ablation.seeds = 2;
    cfg.ablation.r_sweep = vec![4, 8, 16];
    cfg.ablation.sweep_backbone = None;
    cfg
}

fn sigma_bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sigma"));
    c.env("SIGMA_THREADS", "1");
    c
}

fn write_config(dir: &Path, v: &Value) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, v.to_string()).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_config().canonical();
    let mut cases = Vec::new();
    let mut unknown = base.clone();
    unknown["train"]["momentum"] = json!(0.9);
    cases.push((unknown, "train"));
    let mut bad_type = base.clone();
    bad_type["backbone"]["depth"] = json!("deep");
    cases.push((bad_type, "backbone.depth"));
    let mut bad_r = base.clone();
    bad_r["ablation"]["r_sweep"] = json!([8, 64]);
    cases.push((bad_r, "ablation.r_sweep"));
    let mut bad_classes = base.clone();
    bad_classes["task"]["classes"] = json!(7);
    cases.push((bad_classes, "task.classes"));
    for (cfg, path) in cases {
        let p = write_config(dir.path(), &cfg);
        let out = sigma_bin().args(["train", "--config"]).arg(&p).arg("--out").arg(dir.path()).output().unwrap();
        assert_eq!(out.status.code(), Some(EXIT_CONFIG), "{path}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.contains(path), "{path}: {stderr}");
    }
    let out = sigma_bin().args(["ablate", "--config", "/nonexistent/cfg.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn paramcount_reports_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let out = sigma_bin().arg("paramcount").arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["command"], "paramcount");
    let methods = report["results"]["methods"].as_array().unwrap();
    let sigma = methods.iter().find(|m| m["method"] == "sigma").unwrap();
    assert_eq!(sigma["trainable_params"], 1_520_640);
    assert_eq!(report["results"]["sigma_layer"]["per_layer"], 63_360);
    let prov = &report["provenance"];
    assert!(prov["version"].is_string() && prov["timestamp"].is_u64());
}

#[test]
fn gradcheck_passes_every_op() {
    let report = run_cases(&default_cases(), DEFAULT_TOLERANCE, DEFAULT_INSTANCES, 0, json!({})).unwrap();
    let cases = report.results["cases"].as_array().unwrap();
    assert!(cases.len() >= 12);
    assert!(cases.iter().all(|c| c["passed"] == true && c["instances"] == DEFAULT_INSTANCES));
}

#[test]
fn gradcheck_catches_a_broken_backward() {
    // The value passes through a constant copy, so the tape sees y = x * c
    // while the true function is x^2.
    let broken = GradCase::op("stop_gradient_square", &[&[3, 4]], |g, v| {
        let copy = g.constant(g.value(v[0]).clone());
        let y = g.mul(v[0], copy)?;
        Ok(g.sum(y))
    });
    let mut cases = default_cases();
    cases.truncate(2);
    cases.push(broken);
    let err = run_cases(&cases, DEFAULT_TOLERANCE, 3, 0, json!({})).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_FAILURE);
    assert!(err.to_string().contains("stop_gradient_square"));
    let sigma_cli::CliError::Failed { report: Some(report), .. } = err else { panic!("report expected") };
    assert_eq!(report.results["failing"], json!(["stop_gradient_square"]));
}

#[test]
fn train_is_deterministic_and_writes_artifacts() {
    let cfg = small_config().canonical();
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let p = write_config(dir.path(), &cfg);
            let out = sigma_bin().args(["train", "--seed", "3", "--config"]).arg(&p).arg("--out").arg(dir.path()).output().unwrap();
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            dir
        })
        .collect();
    let metrics: Vec<Vec<u8>> = runs.iter().map(|d| std::fs::read(d.path().join("metrics.jsonl")).unwrap()).collect();
    assert_eq!(metrics[0], metrics[1]);
    assert_eq!(std::str::from_utf8(&metrics[0]).unwrap().lines().count(), 2);
    let ck: Vec<Vec<u8>> = runs.iter().map(|d| std::fs::read(d.path().join("checkpoint.ckpt")).unwrap()).collect();
    assert_eq!(ck[0], ck[1]);
    let report = read_json(&runs[0].path().join("report.json"));
    assert_eq!(report["results"]["run"]["frozen_unchanged"], true);
    assert_eq!(report["config"]["train"]["seed"], 3);
}

#[test]
fn fixed_method_writes_header_only_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config().canonical();
    cfg["method"] = json!({ "name": "fixed" });
    let p = write_config(dir.path(), &cfg);
    let out = sigma_bin().args(["train", "--config"]).arg(&p).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::metadata(dir.path().join("checkpoint.ckpt")).unwrap().len(), 48);
}

#[test]
fn inferred_hyperparameters_are_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config().canonical();
    cfg["method"] = json!({ "name": "lora", "rank": 4 });
    let p = write_config(dir.path(), &cfg);
    let out = sigma_bin().args(["train", "--config"]).arg(&p).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let report = read_json(&dir.path().join("report.json"));
    let flags = report["provenance"]["inferred_hyperparameters"].as_array().unwrap();
    assert!(!flags.is_empty());
    assert!(flags.iter().all(|f| f.as_str().unwrap().contains(sigma_cli::report::INFERRED_FLAG)));
}

#[test]
fn ablation_rows_follow_the_contract() {
    let cfg = small_config();
    let outcome = run_ablation(&cfg, 10, true, true).unwrap();
    assert_eq!(outcome.ablation.len(), 6);
    assert_eq!(outcome.sweep.len(), 6);
    let rows = outcome.report.results["ablation_rows"].as_array().unwrap();
    for row in rows {
        let keys: Vec<&str> = row.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["mean_iou", "pixel_accuracy", "seed", "variant"]);
        assert!(["all", "no-fusion", "no-modulation"].contains(&row["variant"].as_str().unwrap()));
        assert!([10, 11].contains(&row["seed"].as_u64().unwrap()));
    }
    let summary = &outcome.report.results["ablation_summary"];
    assert_eq!(summary["seeds"], 2);
    assert_eq!(outcome.report.results["sweep_summary"]["r"], json!([4, 8, 16]));
}

#[test]
fn ablation_requires_sigma() {
    let mut cfg = small_config();
    cfg.method = Method::Fixed;
    assert_eq!(run_ablation(&cfg, 0, true, false).err().unwrap().exit_code(), EXIT_CONFIG);
}

#[test]
fn readme_config_example_parses() {
    let readme = include_str!("../../../README.md");
    let start = readme.find("```json").expect("json block") + "```json".len();
    let len = readme[start..].find("```").expect("closing fence");
    let cfg = ExperimentConfig::from_json(&readme[start..start + len]).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}
