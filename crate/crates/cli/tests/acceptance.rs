//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::Instant;

use serde_json::{json, Value};
use sigma_cli::ablate::run_ablation;
use sigma_cli::gradcheck::{cmd_gradcheck, DEFAULT_TOLERANCE, LAYER_TOLERANCE};
use sigma_cli::paramcount::cmd_paramcount;
use sigma_cli::train::{cmd_train, CHECKPOINT_FILE, METRICS_FILE};
use sigma_cli::ExperimentConfig;
use sigma_core::baselines::Method;
use sigma_core::params::{count_scalars, ParamTree};
use sigma_core::sigma::{SigmaConfig, SigmaParams};
use sigma_core::train::checkpoint::encoded_size;
use sigma_core::train::{gen_task, load_checkpoint};
use sigma_core::vit::{partition_for, VitConfig, VitModel, VitParams};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn err(e: impl std::fmt::Display) -> Outcome {
    outcome(false, format!("error: {e}"))
}

/// Independent oracle for the adapter layer size.
fn closed_form(d: u64, r: u64) -> u64 {
    9 * r * r + (2 * d + 84) * r + 3 * d
}

fn param_grid() -> Outcome {
    let ds = [2, 3, 8, 16, 32, 48, 64, 96, 128, 192, 256, 384, 512, 768, 1024];
    let rs = [1, 2, 4, 8, 16, 32, 64, 128, 256, 512];
    let mut checked = 0;
    let mut bad = Vec::new();
    for &d in &ds {
        for &r in rs.iter().filter(|&&r| r < d) {
            let n = count_scalars(&SigmaParams::layout(&SigmaConfig::new(d, r))) as u64;
            checked += 1;
            if n != closed_form(d as u64, r as u64) {
                bad.push(format!("(d={d}, r={r}): {n}"));
            }
        }
    }
    outcome(bad.is_empty(), format!("{checked} (d, r) pairs, {} mismatches {:?}", bad.len(), bad))
}

fn paramcount_report() -> Result<Value, String> {
    let b = VitConfig::vit_b_audit();
    cmd_paramcount(&b, json!({ "backbone": b }), 0).map(|r| r.results).map_err(|e| e.to_string())
}

fn row<'a>(results: &'a Value, method: &str) -> &'a Value {
    results["methods"].as_array().and_then(|m| m.iter().find(|r| r["method"] == method)).unwrap_or(&Value::Null)
}

fn table_audit(results: &Value) -> Outcome {
    let published = [("fixed", 0.0), ("partial1", 7.09), ("lora", 2.36), ("adapter", 2.38), ("adaptformer", 1.19)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, m) in published {
        let Some(n) = row(results, name)["trainable_params"].as_u64() else { return err(format!("{name} row missing")) };
        let within = if m == 0.0 { n == 0 } else { ((n as f64 - m * 1e6) / (m * 1e6)).abs() <= 0.01 };
        ok &= within;
        parts.push(format!("{name} {n}"));
    }
    let sigma = row(results, "sigma");
    let n = sigma["trainable_params"].as_u64().unwrap_or(0);
    let delta = sigma["delta_percent"].as_f64().unwrap_or(f64::NAN);
    ok &= n == 1_520_640 && delta.abs() <= 3.0;
    parts.push(format!("sigma {n} ({delta:+.2}% vs 1.48M)"));
    outcome(ok, parts.join(", "))
}

fn percent_trainable(results: &Value) -> Outcome {
    let p = row(results, "sigma")["percent_of_backbone"].as_f64().unwrap_or(f64::NAN);
    outcome((p - 1.72).abs() <= 0.3, format!("{p:.3}% of {} backbone parameters", results["backbone_params"]))
}

fn gradients() -> Outcome {
    let report = match cmd_gradcheck(DEFAULT_TOLERANCE, 0, json!({})) {
        Ok(r) => r,
        Err(e) => return err(e),
    };
    let cases = report.results["cases"].as_array().cloned().unwrap_or_default();
    let worst = |layer: bool| {
        cases
            .iter()
            .filter(|c| (c["tolerance"].as_f64() == Some(LAYER_TOLERANCE)) == layer)
            .map(|c| c["max_rel_error"].as_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    };
    let (ops, layer) = (worst(false), worst(true));
    let instances = cases.iter().map(|c| c["instances"].as_u64().unwrap_or(0)).min().unwrap_or(0);
    outcome(
        ops < 1e-6 && layer < 1e-4 && instances >= 20 && cases.len() >= 12,
        format!("{} cases x {instances} instances, ops max {ops:.2e}, layer max {layer:.2e}", cases.len()),
    )
}

fn identity_at_init(cfg: &ExperimentConfig) -> Result<usize, String> {
    let task = gen_task(&cfg.task, 0, 2).map_err(|e| e.to_string())?;
    let methods = [
        cfg.method,
        Method::Sigma { r: 32, modulation: false, fusion: true },
        Method::Sigma { r: 32, modulation: true, fusion: false },
        Method::Adapter { bottleneck: 64 },
        Method::Adaptformer { bottleneck: 64, scaling: 0.1 },
        Method::Lora { rank: 32, scaling: 1.0 },
    ];
    let frozen = VitModel::new(cfg.backbone.clone(), Method::Fixed, 0).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for m in methods {
        let model = VitModel::new(cfg.backbone.clone(), m, 0).map_err(|e| e.to_string())?;
        for i in 0..task.len() {
            let a = model.predict(&task.image(i)).map_err(|e| e.to_string())?;
            let b = frozen.predict(&task.image(i)).map_err(|e| e.to_string())?;
            if !a.bit_eq(&b) {
                return Err(format!("{} differs from the frozen backbone at init", m.name()));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

fn checkpoint_ratio() -> f64 {
    let cfg = VitConfig::vit_b_audit();
    let bytes = |method: &Method| {
        let layout = VitParams::layout(&cfg, method).expect("audit layout");
        let part = partition_for(&layout, method, cfg.d).expect("partition");
        let mut entries = Vec::new();
        layout.visit("", &mut |name, spec| {
            if part.is_trainable(name) {
                entries.push((name.to_string(), spec.shape.clone()));
            }
        });
        encoded_size(entries.iter().map(|(n, s)| (n.as_str(), s.as_slice())))
    };
    bytes(&Method::by_name("sigma").unwrap()) as f64 / bytes(&Method::Full) as f64
}

fn main() {
    let cfg = ExperimentConfig::default();
    let mut results: Vec<(u8, &str, Outcome, f64)> = Vec::new();
    let mut timed = |id, name, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        results.push((id, name, o, t.elapsed().as_secs_f64()));
    };

    timed(1, "parameter-count exactness", &mut param_grid);
    let audit = paramcount_report();
    timed(2, "baseline parameter audit", &mut || audit.as_ref().map_or_else(err, table_audit));
    timed(3, "percent trainable", &mut || audit.as_ref().map_or_else(err, percent_trainable));
    timed(4, "gradient correctness", &mut gradients);

    let dirs = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
    let mut train_runs = Vec::new();
    timed(5, "identity at init and freeze invariance", &mut || {
        let identity = match identity_at_init(&cfg) {
            Ok(n) => n,
            Err(e) => return err(e),
        };
        let report = match cmd_train(&cfg, 0, dirs[0].path()) {
            Ok(r) => r,
            Err(e) => return err(e),
        };
        let frozen = report.results["run"]["frozen_unchanged"] == true;
        let steps = report.results["run"]["final_eval"]["step"].clone();
        train_runs.push(report);
        outcome(frozen, format!("{identity} forward passes bit-identical at init; frozen hash unchanged after {steps} steps: {frozen}"))
    });

    timed(6, "ablation ordering", &mut || {
        let ablation = run_ablation(&cfg, 0, true, false);
        let r = match &ablation {
            Ok(o) => &o.report.results["ablation_summary"],
            Err(e) => return err(e),
        };
        let holds = r["seeds_with_ordering"].as_u64().unwrap_or(0);
        let per_seed: Vec<String> = r["per_seed"]
            .as_array()
            .into_iter()
            .flatten()
            .map(|s| {
                let f = |k: &str| s[k].as_f64().unwrap_or(f64::NAN);
                format!("seed {} {:.4}/{:.4}/{:.4}", s["seed"], f("all"), f("no-modulation"), f("no-fusion"))
            })
            .collect();
        let med = &r["median_accuracy"];
        outcome(
            holds >= 3,
            format!(
                "all >= no-modulation >= no-fusion in {holds}/{} seeds; medians {:.4}/{:.4}/{:.4}; {}",
                r["seeds"],
                med["all"].as_f64().unwrap_or(f64::NAN),
                med["no-modulation"].as_f64().unwrap_or(f64::NAN),
                med["no-fusion"].as_f64().unwrap_or(f64::NAN),
                per_seed.join("; ")
            ),
        )
    });
    timed(7, "width sweep diminishing returns", &mut || {
        let sweep = run_ablation(&cfg, 0, false, true);
        let r = match &sweep {
            Ok(o) => &o.report.results["sweep_summary"],
            Err(e) => return err(e),
        };
        let holds = r["seeds_with_diminishing_returns"].as_u64().unwrap_or(0);
        let per_seed: Vec<String> = r["per_seed"]
            .as_array()
            .into_iter()
            .flatten()
            .map(|s| {
                let acc: Vec<String> =
                    s["accuracy"].as_array().into_iter().flatten().map(|a| format!("{:.4}", a.as_f64().unwrap_or(f64::NAN))).collect();
                format!("seed {} {}", s["seed"], acc.join("/"))
            })
            .collect();
        outcome(
            holds >= 3,
            format!(
                "gain r={:?} first step > second step in {holds}/{} seeds; plateau or drop at largest r in {}; {}",
                r["r"].as_array().map(|a| a.iter().map(|x| x.as_u64().unwrap_or(0)).collect::<Vec<_>>()).unwrap_or_default(),
                r["seeds"],
                r["seeds_with_plateau_or_drop"],
                per_seed.join("; ")
            ),
        )
    });

    timed(8, "determinism and checkpoint contract", &mut || {
        let second = match cmd_train(&cfg, 0, dirs[1].path()) {
            Ok(r) => r,
            Err(e) => return err(e),
        };
        let Some(first) = train_runs.first() else { return err("criterion 5 run missing") };
        let read = |i: usize, f: &str| std::fs::read(dirs[i].path().join(f)).unwrap_or_default();
        let metrics_equal = !read(0, METRICS_FILE).is_empty() && read(0, METRICS_FILE) == read(1, METRICS_FILE);
        let results_equal = first.results_bytes() == second.results_bytes();
        let ck_bytes = read(0, CHECKPOINT_FILE);
        let round_trip = match load_checkpoint(dirs[0].path().join(CHECKPOINT_FILE)) {
            Ok(ck) => ck.to_bytes().map(|b| b == ck_bytes).unwrap_or(false) && ck_bytes == read(1, CHECKPOINT_FILE),
            Err(_) => false,
        };
        let ratio = checkpoint_ratio();
        outcome(
            metrics_equal && results_equal && round_trip && ratio < 0.02,
            format!(
                "metrics identical: {metrics_equal}; results identical: {results_equal}; round trip bit-exact: {round_trip}; adapter/full checkpoint size {:.3}%",
                100.0 * ratio
            ),
        )
    });

    let mut failed = 0;
    for (id, name, o, secs) in &results {
        if !o.passed {
            failed += 1;
        }
        println!("criterion {id} {}: {name} ({secs:.1}s): {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
