//! Trainable-parameter audit for every method on one backbone.

use serde::Serialize;
use serde_json::json;
use sigma_core::baselines::{baseline_param_count, Method};
use sigma_core::params::ParamTree;
use sigma_core::sigma::{sigma_param_count, SigmaConfig, SigmaParams};
use sigma_core::vit::{count_trainable, partition_for, VitConfig, VitParams};

use crate::{CliError, RunReport};

/// Published trainable counts (millions) for the ViT-B-shaped backbone.
pub const REFERENCE_MILLIONS: [(&str, f64); 7] = [
    ("fixed", 0.0),
    ("bitfit", 0.10),
    ("partial1", 7.09),
    ("lora", 2.36),
    ("adapter", 2.38),
    ("adaptformer", 1.19),
    ("sigma", 1.48),
];

/// Published SIGMA totals (millions) for the bottleneck-width sweep.
pub const REFERENCE_R_SWEEP: [(usize, f64); 4] = [(16, 0.72), (32, 1.48), (64, 3.25), (128, 7.82)];

#[derive(Clone, Debug, Serialize)]
pub struct MethodRow {
    pub method: String,
    pub trainable_params: u64,
    pub percent_of_backbone: f64,
    pub reference_millions: Option<f64>,
    /// `100 · (count − reference) / reference`, absent when the reference is 0.
    pub delta_percent: Option<f64>,
    pub inferred: Vec<String>,
}

fn delta(count: u64, reference_m: f64) -> Option<f64> {
    (reference_m > 0.0).then(|| 100.0 * (count as f64 - reference_m * 1e6) / (reference_m * 1e6))
}

/// Enumerated count, cross-checked against the closed form.
pub fn method_count(backbone: &VitConfig, method: &Method) -> Result<u64, CliError> {
    let layout = VitParams::layout(backbone, method)?;
    let part = partition_for(&layout, method, backbone.d)?;
    let enumerated = count_trainable(&layout, &part);
    let closed = baseline_param_count(method, backbone)?;
    if enumerated != closed {
        return Err(CliError::failed(format!(
            "{}: enumerated {enumerated} trainable scalars, closed form gives {closed}",
            method.name()
        )));
    }
    Ok(enumerated)
}

/// One row per method whose default hyperparameters fit the backbone.
pub fn rows(backbone: &VitConfig) -> Result<Vec<MethodRow>, CliError> {
    let total = backbone.backbone_params() as f64;
    Method::ALL_NAMES
        .iter()
        .filter_map(|&name| Method::by_name(name).ok().filter(|m| m.validate(backbone.d).is_ok()).map(|m| (name, m)))
        .map(|(name, method)| {
            let count = method_count(backbone, &method)?;
            let reference = REFERENCE_MILLIONS.iter().find(|(n, _)| *n == name).map(|&(_, m)| m);
            Ok(MethodRow {
                method: name.to_string(),
                trainable_params: count,
                percent_of_backbone: 100.0 * count as f64 / total,
                reference_millions: reference,
                delta_percent: reference.and_then(|m| delta(count, m)),
                inferred: method.inferred_hyperparameters(),
            })
        })
        .collect()
}

pub fn cmd_paramcount(backbone: &VitConfig, config_echo: serde_json::Value, seed: u64) -> Result<RunReport, CliError> {
    let rows = rows(backbone)?;
    let d = backbone.d;
    let sigma = Method::by_name("sigma")?;
    let Method::Sigma { r, .. } = sigma else { unreachable!() };
    let layer = SigmaParams::layout(&SigmaConfig::new(d, r));
    let mut breakdown = serde_json::Map::new();
    layer.visit("", &mut |name, spec| {
        let group = name.split('.').next().unwrap_or(name).to_string();
        let e = breakdown.entry(group).or_insert(json!(0));
        *e = json!(e.as_u64().unwrap() + spec.numel() as u64);
    });
    let per_layer = sigma_param_count(d as u64, r as u64);
    let enumerated: u64 = breakdown.values().map(|v| v.as_u64().unwrap()).sum();
    if enumerated != per_layer {
        return Err(CliError::failed(format!("sigma layer: enumerated {enumerated}, closed form {per_layer}")));
    }
    let insertions = 2 * backbone.depth as u64;
    let sweep: Vec<_> = REFERENCE_R_SWEEP
        .iter()
        .filter(|&&(r, _)| r < d)
        .map(|&(r, m)| {
            let total = sigma_param_count(d as u64, r as u64) * insertions;
            json!({ "r": r, "trainable_params": total, "reference_millions": m, "delta_percent": delta(total, m) })
        })
        .collect();
    let inferred: Vec<String> = rows.iter().flat_map(|r| r.inferred.iter().cloned()).collect();
    let skipped: Vec<&str> =
        Method::ALL_NAMES.iter().copied().filter(|n| !rows.iter().any(|r| r.method == *n)).collect();
    let results = json!({
        "backbone_params": backbone.backbone_params(),
        "methods": rows,
        "skipped_methods": skipped,
        "sigma_layer": {
            "d": d,
            "r": r,
            "per_layer": per_layer,
            "insertions": insertions,
            "breakdown": breakdown,
        },
        "sigma_r_sweep": sweep,
    });
    Ok(RunReport::new("paramcount", config_echo, results, seed, inferred))
}
