//! `ablate`: the fusion/modulation ablation and the bottleneck-width sweep
//! over shared seeds.

use std::path::Path;

use serde::Serialize;
use serde_json::json;
use sigma_core::baselines::Method;

use crate::experiment::{parallel, run};
use crate::{CliError, ExperimentConfig, RunReport};

/// A gain at the largest r below this counts as a plateau.
pub const PLATEAU_MARGIN: f64 = 0.005;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    All,
    NoFusion,
    NoModulation,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::All, Variant::NoFusion, Variant::NoModulation];

    pub fn method(self, r: usize) -> Method {
        Method::Sigma {
            r,
            modulation: self != Variant::NoModulation,
            fusion: self != Variant::NoFusion,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub r: usize,
    pub seed: u64,
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn acc_of(rows: &[AblationRow], v: Variant, seed: u64) -> f64 {
    rows.iter().find(|r| r.variant == v && r.seed == seed).map_or(f64::NAN, |r| r.pixel_accuracy)
}

/// Per-seed check of `all ≥ no-modulation ≥ no-fusion`, plus medians.
pub fn summarize_ablation(rows: &[AblationRow], seeds: &[u64]) -> serde_json::Value {
    let per_seed: Vec<_> = seeds
        .iter()
        .map(|&s| {
            let (a, m, f) =
                (acc_of(rows, Variant::All, s), acc_of(rows, Variant::NoModulation, s), acc_of(rows, Variant::NoFusion, s));
            json!({ "seed": s, "all": a, "no-modulation": m, "no-fusion": f, "ordering_holds": a >= m && m >= f })
        })
        .collect();
    let holds = per_seed.iter().filter(|v| v["ordering_holds"].as_bool() == Some(true)).count();
    let med = |v: Variant| median(rows.iter().filter(|r| r.variant == v).map(|r| r.pixel_accuracy).collect());
    let (ma, mm, mf) = (med(Variant::All), med(Variant::NoModulation), med(Variant::NoFusion));
    json!({
        "median_accuracy": { "all": ma, "no-modulation": mm, "no-fusion": mf },
        "median_ordering_holds": ma >= mm && mm >= mf,
        "per_seed": per_seed,
        "seeds_with_ordering": holds,
        "seeds": seeds.len(),
    })
}

/// Per-seed gains between consecutive swept widths.
pub fn summarize_sweep(rows: &[SweepRow], rs: &[usize], seeds: &[u64]) -> serde_json::Value {
    let mut sorted = rs.to_vec();
    sorted.sort_unstable();
    let acc = |r: usize, s: u64| rows.iter().find(|x| x.r == r && x.seed == s).map_or(f64::NAN, |x| x.pixel_accuracy);
    let per_seed: Vec<_> = seeds
        .iter()
        .map(|&s| {
            let accs: Vec<f64> = sorted.iter().map(|&r| acc(r, s)).collect();
            let gains: Vec<f64> = accs.windows(2).map(|w| w[1] - w[0]).collect();
            let diminishing = gains.len() >= 2 && gains[0] > gains[1];
            let plateau = gains.last().is_some_and(|&g| g < PLATEAU_MARGIN);
            json!({
                "seed": s,
                "accuracy": accs,
                "gains": gains,
                "diminishing_returns": diminishing,
                "plateau_or_drop_at_largest_r": plateau,
            })
        })
        .collect();
    let count = |key: &str| per_seed.iter().filter(|v| v[key].as_bool() == Some(true)).count();
    json!({
        "r": sorted,
        "median_accuracy": sorted.iter().map(|&r| median(seeds.iter().map(|&s| acc(r, s)).collect())).collect::<Vec<_>>(),
        "per_seed": per_seed,
        "seeds_with_diminishing_returns": count("diminishing_returns"),
        "seeds_with_plateau_or_drop": count("plateau_or_drop_at_largest_r"),
        "seeds": seeds.len(),
    })
}

#[derive(Clone, Copy)]
enum Job {
    Ablation(Variant, u64),
    Sweep(usize, u64),
}

pub struct AblationOutcome {
    pub ablation: Vec<AblationRow>,
    pub sweep: Vec<SweepRow>,
    pub report: RunReport,
}

/// Runs the three-variant ablation and/or the width sweep. Results for the
/// parts not requested are left empty.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    seed: u64,
    include_ablation: bool,
    include_sweep: bool,
) -> Result<AblationOutcome, CliError> {
    let seeds: Vec<u64> = (0..cfg.ablation.seeds as u64).map(|i| seed + i).collect();
    let r = match cfg.method {
        Method::Sigma { r, .. } => r,
        _ => return Err(CliError::config("method", "ablation needs the sigma method")),
    };
    let sweep_backbone = cfg.sweep_backbone();
    let mut jobs = Vec::new();
    if include_ablation {
        jobs.extend(Variant::ALL.iter().flat_map(|&v| seeds.iter().map(move |&s| Job::Ablation(v, s))));
    }
    if include_sweep {
        jobs.extend(cfg.ablation.r_sweep.iter().flat_map(|&r| seeds.iter().map(move |&s| Job::Sweep(r, s))));
    }
    let outcomes = parallel(&jobs, |job| {
        let (backbone, method, s) = match *job {
            Job::Ablation(v, s) => (&cfg.backbone, v.method(r), s),
            Job::Sweep(r, s) => (&sweep_backbone, Variant::All.method(r), s),
        };
        run(cfg, backbone, &method, s).map(|run| run.summary.final_eval)
    })?;
    let mut ablation = Vec::new();
    let mut sweep = Vec::new();
    for (job, m) in jobs.iter().zip(outcomes) {
        match *job {
            Job::Ablation(variant, seed) => ablation.push(AblationRow {
                variant,
                seed,
                pixel_accuracy: m.pixel_accuracy,
                mean_iou: m.mean_iou,
            }),
            Job::Sweep(r, seed) => sweep.push(SweepRow { r, seed, pixel_accuracy: m.pixel_accuracy, mean_iou: m.mean_iou }),
        }
    }
    let mut results = json!({});
    if include_ablation {
        results["ablation_rows"] = serde_json::to_value(&ablation).expect("rows serialize");
        results["ablation_summary"] = summarize_ablation(&ablation, &seeds);
    }
    if include_sweep {
        results["sweep_backbone"] = serde_json::to_value(&sweep_backbone).expect("config serializes");
        results["sweep_rows"] = serde_json::to_value(&sweep).expect("rows serialize");
        results["sweep_summary"] = summarize_sweep(&sweep, &cfg.ablation.r_sweep, &seeds);
    }
    let report = RunReport::new("ablate", cfg.canonical(), results, seed, Vec::new());
    Ok(AblationOutcome { ablation, sweep, report })
}

pub fn cmd_ablate(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunReport, CliError> {
    let outcome = run_ablation(cfg, seed, true, true)?;
    outcome.report.write(out)?;
    Ok(outcome.report)
}
