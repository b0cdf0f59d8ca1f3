//! Finite-difference audit of every differentiable op and the full adapter layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sigma_core::gradcheck::finite_diff_check_many;
use sigma_core::nn::{self, TokenGrid};
use sigma_core::params::{Init, ParamSpec, ParamTree};
use sigma_core::sigma::{modulate, sigma_forward, SigmaConfig, SigmaParams};
use sigma_core::{Graph, Reduce, Result, Tensor, Var};

use crate::{CliError, RunReport};

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;
const EPS: f64 = 1e-5;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Sync>;

/// A scalar-valued function of random inputs with a pass threshold.
pub struct GradCase {
    pub name: String,
    pub shapes: Vec<Vec<usize>>,
    /// Checked against the layer tolerance instead of the per-op one.
    pub layer: bool,
    pub build: Build,
}

impl GradCase {
    pub fn op(name: &str, shapes: &[&[usize]], build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + 'static) -> Self {
        Self { name: name.into(), shapes: shapes.iter().map(|s| s.to_vec()).collect(), layer: false, build: Box::new(build) }
    }
}

/// `Σ out ⊙ w` for a fixed pseudo-random `w`, so every output coordinate
/// receives a distinct upstream gradient.
fn contract(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let w = Tensor::uniform(shape, 1.0, &mut rng);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

const N: usize = 12;
const H: usize = 3;
const W: usize = 4;

fn sigma_layout(modulation: bool, fusion: bool) -> (SigmaConfig, SigmaParams<ParamSpec>) {
    let cfg = SigmaConfig { d: 8, r: 4, modulation_enabled: modulation, fusion_enabled: fusion };
    let mut layout = SigmaParams::layout(&cfg);
    // Zero-initialized leaves would hide whole gradient paths.
    layout.visit_mut("", &mut |_, s| s.init = Init::Uniform(0.5));
    (cfg, layout)
}

fn sigma_case(name: &str, modulation: bool, fusion: bool) -> GradCase {
    let (cfg, layout) = sigma_layout(modulation, fusion);
    let mut shapes = vec![vec![H * W, cfg.d]];
    layout.visit("", &mut |_, s| shapes.push(s.shape.clone()));
    GradCase {
        name: name.into(),
        shapes,
        layer: true,
        build: Box::new(move |g, v| {
            let mut i = 0;
            let p = layout.map_named("", &mut |_, _| {
                i += 1;
                v[i]
            });
            let out = sigma_forward(g, v[0], &p, &cfg, H, W)?;
            contract(g, out)
        }),
    }
}

/// Every differentiable primitive plus the adapter layer in each ablation mode.
pub fn default_cases() -> Vec<GradCase> {
    let grid = |x: Var| TokenGrid { tokens: x, height: H, width: W };
    let mut cases = vec![
        GradCase::op("matmul", &[&[4, 5], &[5, 3]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            contract(g, y)
        }),
        GradCase::op("add_broadcast", &[&[4, 5], &[5]], |g, v| {
            let y = g.add(v[0], v[1])?;
            contract(g, y)
        }),
        GradCase::op("sub_broadcast", &[&[4, 5], &[4, 1]], |g, v| {
            let y = g.sub(v[0], v[1])?;
            contract(g, y)
        }),
        GradCase::op("mul_broadcast", &[&[3, 4, 2], &[4, 1]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            contract(g, y)
        }),
        GradCase::op("scale", &[&[3, 3]], |g, v| {
            let y = g.scale(v[0], -1.7);
            contract(g, y)
        }),
        GradCase::op("sum_axis", &[&[3, 4, 2]], |g, v| {
            let y = g.reduce(v[0], Reduce::Sum, Some(1))?;
            contract(g, y)
        }),
        GradCase::op("mean_axis", &[&[3, 4, 2]], |g, v| {
            let y = g.reduce(v[0], Reduce::Mean, Some(2))?;
            contract(g, y)
        }),
        GradCase::op("mean_all", &[&[5, 2]], |g, v| {
            let y = g.mean(v[0]);
            contract(g, y)
        }),
        GradCase::op("transpose", &[&[3, 5]], |g, v| {
            let y = g.transpose(v[0])?;
            contract(g, y)
        }),
        GradCase::op("slice_cols", &[&[4, 6]], |g, v| {
            let y = g.slice_cols(v[0], 2, 3)?;
            contract(g, y)
        }),
        GradCase::op("layer_norm", &[&[4, 6], &[6], &[6]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], nn::LN_EPS)?;
            contract(g, y)
        }),
        GradCase::op("gelu", &[&[4, 6]], |g, v| {
            let y = g.gelu(v[0]);
            contract(g, y)
        }),
        GradCase::op("pwconv", &[&[N, 3], &[3, 3]], move |g, v| {
            let y = nn::pwconv(g, grid(v[0]), v[1])?;
            contract(g, y.tokens)
        }),
        GradCase::op("attention", &[&[5, 4], &[5, 4], &[5, 4]], |g, v| {
            let y = g.attention(v[0], v[1], v[2], 2)?;
            contract(g, y)
        }),
        GradCase::op("upsample", &[&[6, 3]], |g, v| {
            let y = g.upsample_tokens(v[0], 2, 3, 2)?;
            contract(g, y)
        }),
        GradCase::op("cross_entropy", &[&[3, 2, 4]], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 1, 2, 0, 0, 1])),
        GradCase::op("modulate", &[&[N, 3], &[N, 3], &[N, 3]], move |g, v| {
            let y = modulate(g, grid(v[0]), v[1], v[2])?;
            contract(g, y.tokens)
        }),
    ];
    for k in sigma_core::sigma::KERNEL_SIZES {
        cases.push(GradCase::op(&format!("dwconv{k}"), &[&[N, 3], &[3, k, k]], move |g, v| {
            let y = g.dwconv2d(v[0], v[1], H, W)?;
            contract(g, y)
        }));
    }
    cases.push(sigma_case("sigma_layer", true, true));
    cases.push(sigma_case("sigma_layer_no_modulation", false, true));
    cases.push(sigma_case("sigma_layer_no_fusion", true, false));
    cases
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn check_case(case: &GradCase, idx: usize, instances: usize, tol: f64, seed: u64) -> Result<CaseResult> {
    let tolerance = if case.layer { LAYER_TOLERANCE } else { tol };
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x1000_0000_01b3) ^ ((idx as u64) << 32) ^ inst as u64);
        let inputs: Vec<Tensor> = case
            .shapes
            .iter()
            .map(|s| {
                let scale = rng.gen_range(0.5..2.0);
                Tensor::uniform(s.clone(), scale, &mut rng)
            })
            .collect();
        worst = worst.max(finite_diff_check_many(|g, v| (case.build)(g, v), &inputs, EPS)?);
    }
    Ok(CaseResult { name: case.name.clone(), instances, max_rel_error: worst, tolerance, passed: worst < tolerance })
}

/// Runs `cases`; fails with exit code 1 listing every case over tolerance.
pub fn run_cases(
    cases: &[GradCase],
    tolerance: f64,
    instances: usize,
    seed: u64,
    config_echo: serde_json::Value,
) -> std::result::Result<RunReport, CliError> {
    if !(tolerance > 0.0) {
        return Err(CliError::config("--tolerance", format!("must be positive, got {tolerance}")));
    }
    let mut results = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let r = check_case(case, i, instances, tolerance, seed).unwrap_or_else(|e| CaseResult {
            name: format!("{} ({e})", case.name),
            instances,
            max_rel_error: f64::INFINITY,
            tolerance,
            passed: false,
        });
        results.push(r);
    }
    let failing: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    let json_results: Vec<_> = results
        .iter()
        .map(|r| {
            json!({
                "name": r.name,
                "instances": r.instances,
                // JSON has no infinity; errored cases report null.
                "max_rel_error": r.max_rel_error.is_finite().then_some(r.max_rel_error),
                "tolerance": r.tolerance,
                "passed": r.passed,
            })
        })
        .collect();
    let report = RunReport::new(
        "gradcheck",
        config_echo,
        json!({ "checked": results.len(), "cases": json_results, "failing": failing }),
        seed,
        Vec::new(),
    );
    if failing.is_empty() {
        Ok(report)
    } else {
        Err(CliError::Failed { message: format!("gradient check failed: {}", failing.join(", ")), report: Some(Box::new(report)) })
    }
}

pub fn cmd_gradcheck(tolerance: f64, seed: u64, config_echo: serde_json::Value) -> std::result::Result<RunReport, CliError> {
    run_cases(&default_cases(), tolerance, DEFAULT_INSTANCES, seed, config_echo)
}
