//! `train`: one seeded run writing metrics, a report and a checkpoint.

use std::io::Write;
use std::path::Path;

use serde_json::json;
use sigma_core::train::save_checkpoint;

use crate::experiment::run;
use crate::{CliError, ExperimentConfig, RunReport};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

pub fn cmd_train(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunReport, CliError> {
    std::fs::create_dir_all(out)?;
    let r = run(cfg, &cfg.backbone, &cfg.method, seed)?;
    let mut metrics = std::fs::File::create(out.join(METRICS_FILE))?;
    for m in &r.outcome.history {
        writeln!(metrics, "{}", serde_json::to_string(m).expect("metrics serialize"))?;
    }
    save_checkpoint(&r.outcome.checkpoint, out.join(CHECKPOINT_FILE))?;
    let results = json!({
        "run": r.summary,
        "last_train_metrics": r.outcome.history.last(),
        "checkpoint_file": CHECKPOINT_FILE,
        "metrics_file": METRICS_FILE,
    });
    let mut config = cfg.canonical();
    config["train"]["seed"] = json!(seed);
    let report = RunReport::new("train", config, results, seed, cfg.method.inferred_hyperparameters());
    report.write(out)?;
    if !r.summary.frozen_unchanged {
        return Err(CliError::Failed {
            message: "frozen parameters changed during training".into(),
            report: Some(Box::new(report)),
        });
    }
    Ok(report)
}
