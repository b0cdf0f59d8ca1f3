//! The SIGMA adapter layer.
//!
//! ```text
//! x_r    = Down(LN(x0))
//! [γ_k, β_k]  = P(x_r)                     k ∈ {3, 5, 7, pw}, per token
//! x_dw   = (1/3) Σ_k Mod(DWConv_k(x_r), γ_k, β_k)
//! x_ms   = x_r + x_dw
//! x_agg  = x_ms + Mod(PWConv(x_ms), γ_pw, β_pw)
//! out    = x0 + Up(GeLU(x_agg))
//! ```
//!
//! `Mod(F, γ, β) = (1 + γ) ⊙ F + β`. With the modulation projection `P`
//! zero-initialized, modulation starts as the identity; with `Up`
//! zero-initialized, the whole layer starts as the identity.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, dim_err, Error, Result};
use crate::nn::{self, LayerNormParams, LinearParams, TokenGrid};
use crate::params::{fan_in_bound, join, materialize, Init, ParamSpec, ParamTree};
use crate::tensor::Tensor;

pub const KERNEL_SIZES: [usize; 3] = [3, 5, 7];

/// Number of (γ, β) groups produced by the modulation projection.
pub const MOD_GROUPS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SigmaConfig {
    pub d: usize,
    pub r: usize,
    #[serde(default = "enabled")]
    pub modulation_enabled: bool,
    #[serde(default = "enabled")]
    pub fusion_enabled: bool,
}

fn enabled() -> bool {
    true
}

impl SigmaConfig {
    pub fn new(d: usize, r: usize) -> Self {
        Self { d, r, modulation_enabled: true, fusion_enabled: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.r >= self.d {
            return config_err(format!("bottleneck r={} must satisfy 0 < r < d={}", self.r, self.d));
        }
        Ok(())
    }

    /// Whether a leaf (by its name within the layer) takes part in the
    /// forward pass under the current ablation flags.
    pub fn uses(&self, leaf: &str) -> bool {
        let conv = matches!(leaf, "dw3" | "dw5" | "dw7" | "pw");
        match leaf {
            "mod_proj" => self.fusion_enabled && self.modulation_enabled,
            _ if conv => self.fusion_enabled,
            _ => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaParams<T = Tensor> {
    pub ln: LayerNormParams<T>,
    pub down: LinearParams<T>,
    pub dw3: T,
    pub dw5: T,
    pub dw7: T,
    /// `[r, r]`, applied as `tokens · pwᵀ`.
    pub pw: T,
    /// `[r, 8r]`, biasless.
    pub mod_proj: T,
    pub up: LinearParams<T>,
}

impl SigmaParams<ParamSpec> {
    pub fn layout(cfg: &SigmaConfig) -> Self {
        let (d, r) = (cfg.d, cfg.r);
        let dw = |k: usize| ParamSpec::new([r, k, k], Init::Uniform(fan_in_bound(k * k)));
        Self {
            ln: LayerNormParams::layout(d),
            down: LinearParams::layout(d, r, true),
            dw3: dw(3),
            dw5: dw(5),
            dw7: dw(7),
            pw: ParamSpec::new([r, r], Init::Uniform(fan_in_bound(r))),
            mod_proj: ParamSpec::new([r, 2 * MOD_GROUPS * r], Init::Zeros),
            up: LinearParams::zeros(r, d, true),
        }
    }
}

impl<T> SigmaParams<T> {
    pub fn dw(&self, k: usize) -> &T {
        match k {
            3 => &self.dw3,
            5 => &self.dw5,
            7 => &self.dw7,
            _ => panic!("no depth-wise branch with kernel {k}"),
        }
    }
}

impl<T> ParamTree for SigmaParams<T> {
    type Leaf = T;
    type Mapped<U> = SigmaParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> SigmaParams<U> {
        SigmaParams {
            ln: self.ln.map_named(&join(prefix, "ln"), f),
            down: self.down.map_named(&join(prefix, "down"), f),
            dw3: f(&join(prefix, "dw3"), &self.dw3),
            dw5: f(&join(prefix, "dw5"), &self.dw5),
            dw7: f(&join(prefix, "dw7"), &self.dw7),
            pw: f(&join(prefix, "pw"), &self.pw),
            mod_proj: f(&join(prefix, "mod_proj"), &self.mod_proj),
            up: self.up.map_named(&join(prefix, "up"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.ln.visit_mut(&join(prefix, "ln"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
        f(&join(prefix, "dw3"), &mut self.dw3);
        f(&join(prefix, "dw5"), &mut self.dw5);
        f(&join(prefix, "dw7"), &mut self.dw7);
        f(&join(prefix, "pw"), &mut self.pw);
        f(&join(prefix, "mod_proj"), &mut self.mod_proj);
        self.up.visit_mut(&join(prefix, "up"), f);
    }
}

/// Freshly initialized layer parameters, deterministic in `seed`.
pub fn sigma_init(cfg: &SigmaConfig, seed: u64) -> Result<SigmaParams> {
    cfg.validate()?;
    Ok(materialize(&SigmaParams::layout(cfg), "", seed))
}

/// Closed-form scalar count of one layer: `9r² + (2d + 84)r + 3d`.
pub fn sigma_param_count(d: u64, r: u64) -> u64 {
    9 * r * r + (2 * d + 84) * r + 3 * d
}

/// Per-token scale/shift pairs, in branch order 3, 5, 7, pw.
#[derive(Clone, Copy, Debug)]
pub struct ModulationSignals {
    pub gamma: [Var; MOD_GROUPS],
    pub beta: [Var; MOD_GROUPS],
}

/// `x_r · mod_proj`, split into eight `r`-wide chunks
/// `(γ3, β3, γ5, β5, γ7, β7, γpw, βpw)`.
pub fn modulation_project(g: &mut Graph, x_r: Var, mod_proj: Var) -> Result<ModulationSignals> {
    let r = g.shape(x_r)[1];
    if g.shape(mod_proj) != [r, 2 * MOD_GROUPS * r] {
        return dim_err(format!(
            "modulation projection {:?} for bottleneck width {r} (expected [{r}, {}])",
            g.shape(mod_proj),
            2 * MOD_GROUPS * r
        ));
    }
    let all = g.matmul(x_r, mod_proj)?;
    let mut gamma = [all; MOD_GROUPS];
    let mut beta = [all; MOD_GROUPS];
    for grp in 0..MOD_GROUPS {
        gamma[grp] = g.slice_cols(all, 2 * grp * r, r)?;
        beta[grp] = g.slice_cols(all, (2 * grp + 1) * r, r)?;
    }
    Ok(ModulationSignals { gamma, beta })
}

/// `(1 + γ) ⊙ F + β` on the token view.
pub fn modulate(g: &mut Graph, f: TokenGrid, gamma: Var, beta: Var) -> Result<TokenGrid> {
    let shape = g.shape(f.tokens);
    if g.shape(gamma) != shape || g.shape(beta) != shape {
        return dim_err(format!(
            "modulating {:?} with γ {:?} and β {:?}",
            shape,
            g.shape(gamma),
            g.shape(beta)
        ));
    }
    let scaled = g.mul(f.tokens, gamma)?;
    let y = g.add(f.tokens, scaled)?;
    let y = g.add(y, beta)?;
    Ok(TokenGrid { tokens: y, ..f })
}

/// One adapter layer on tokens `[h*w, d]`.
pub fn sigma_forward(g: &mut Graph, x0: Var, p: &SigmaParams<Var>, cfg: &SigmaConfig, h: usize, w: usize) -> Result<Var> {
    let shape = g.shape(x0);
    if shape.len() != 2 || shape[1] != cfg.d {
        return dim_err(format!("adapter input {shape:?} for d={}", cfg.d));
    }
    if !g.value(x0).is_finite() {
        return Err(Error::Numeric("non-finite value in adapter input".into()));
    }
    let normed = nn::layer_norm(g, x0, &p.ln)?;
    let x_r = nn::linear(g, normed, &p.down)?;
    let grid = nn::tokens_to_grid(g, x_r, h, w)?;

    let x_agg = if cfg.fusion_enabled {
        let signals = if cfg.modulation_enabled { Some(modulation_project(g, x_r, p.mod_proj)?) } else { None };
        let mut branch_sum: Option<Var> = None;
        for (i, k) in KERNEL_SIZES.into_iter().enumerate() {
            let mut f = nn::dwconv2d(g, grid, *p.dw(k))?;
            if let Some(s) = &signals {
                f = modulate(g, f, s.gamma[i], s.beta[i])?;
            }
            branch_sum = Some(match branch_sum {
                None => f.tokens,
                Some(acc) => g.add(acc, f.tokens)?,
            });
        }
        let x_dw = g.scale(branch_sum.expect("three branches"), 1.0 / KERNEL_SIZES.len() as f64);
        let x_ms = g.add(x_r, x_dw)?;
        let ms_grid = TokenGrid { tokens: x_ms, ..grid };
        let mut f = nn::pwconv(g, ms_grid, p.pw)?;
        if let Some(s) = &signals {
            f = modulate(g, f, s.gamma[MOD_GROUPS - 1], s.beta[MOD_GROUPS - 1])?;
        }
        g.add(x_ms, f.tokens)?
    } else {
        x_r
    };

    let act = nn::gelu(g, x_agg);
    let delta = nn::linear(g, act, &p.up)?;
    g.add(x0, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check_many;
    use crate::params::{bind, count_scalars, named_tensors};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::uniform([n, d], 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn run(params: &SigmaParams, cfg: &SigmaConfig, x: &Tensor, h: usize, w: usize) -> Tensor {
        let mut g = Graph::new();
        let pv = bind(&mut g, params, "", &|_| false);
        let xv = g.constant(x.clone());
        let y = sigma_forward(&mut g, xv, &pv, cfg, h, w).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn counts_match_closed_form() {
        assert_eq!(sigma_param_count(1, 1), 98);
        assert_eq!(sigma_param_count(64, 8), 2464);
        assert_eq!(sigma_param_count(768, 32), 63_360);
        assert_eq!(sigma_param_count(768, 16), 30_528);
        for d in [8, 64, 192, 768] {
            for r in [4, 16, 32, 64, 128] {
                let layout = SigmaParams::layout(&SigmaConfig::new(d, r));
                assert_eq!(count_scalars(&layout) as u64, sigma_param_count(d as u64, r as u64), "d={d} r={r}");
            }
        }
    }

    #[test]
    fn init_rules() {
        let cfg = SigmaConfig::new(16, 4);
        let p = sigma_init(&cfg, 5).unwrap();
        assert!(p.up.weight.data().iter().all(|&v| v == 0.0));
        assert!(p.up.bias.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.mod_proj.data().iter().all(|&v| v == 0.0));
        assert!(p.ln.gain.data().iter().all(|&v| v == 1.0));
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(p.down.weight.data().iter().all(|v| v.abs() <= bound));
        let bound7 = (6.0f64 / 49.0).sqrt();
        assert!(p.dw7.data().iter().all(|v| v.abs() <= bound7));

        let q = sigma_init(&cfg, 5).unwrap();
        for ((_, a), (_, b)) in named_tensors(&p, "").iter().zip(named_tensors(&q, "").iter()) {
            assert!(a.bit_eq(b));
        }
        assert!(matches!(sigma_init(&SigmaConfig::new(8, 8), 0), Err(Error::Config(_))));
    }

    #[test]
    fn identity_at_init() {
        let cfg = SigmaConfig::new(12, 4);
        let p = sigma_init(&cfg, 1).unwrap();
        let x = random_input(6, 12, 2);
        assert!(run(&p, &cfg, &x, 2, 3).bit_eq(&x));
    }

    #[test]
    fn rejects_bad_grid_and_nan() {
        let cfg = SigmaConfig::new(12, 4);
        let p = sigma_init(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let pv = bind(&mut g, &p, "", &|_| false);
        let x = g.constant(random_input(6, 12, 2));
        assert!(matches!(sigma_forward(&mut g, x, &pv, &cfg, 2, 2), Err(Error::Dimension(_))));
        let mut bad = random_input(6, 12, 2);
        bad.data_mut()[3] = f64::NAN;
        let xb = g.constant(bad);
        assert!(matches!(sigma_forward(&mut g, xb, &pv, &cfg, 2, 3), Err(Error::Numeric(_))));
    }

    #[test]
    fn modulation_signal_layout() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([1, 1]));
        let m = g.constant(Tensor::new([1, 8], (1..=8).map(f64::from).collect()).unwrap());
        let s = modulation_project(&mut g, x, m).unwrap();
        let got: Vec<f64> = (0..4).flat_map(|i| [g.value(s.gamma[i]).data()[0], g.value(s.beta[i]).data()[0]]).collect();
        assert_eq!(got, (1..=8).map(f64::from).collect::<Vec<_>>());

        let zero = g.constant(Tensor::zeros([1, 8]));
        let s = modulation_project(&mut g, x, zero).unwrap();
        assert!((0..4).all(|i| g.value(s.gamma[i]).data() == [0.0] && g.value(s.beta[i]).data() == [0.0]));

        let wrong = g.constant(Tensor::zeros([1, 7]));
        assert!(matches!(modulation_project(&mut g, x, wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn modulation_depends_on_content() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = g.constant(Tensor::uniform([2, 3], 1.0, &mut rng));
        let m = g.constant(Tensor::uniform([3, 24], 1.0, &mut rng));
        let s = modulation_project(&mut g, x, m).unwrap();
        let gd = g.value(s.gamma[0]).data();
        assert_ne!(&gd[0..3], &gd[3..6]);
    }

    #[test]
    fn modulate_cases() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let grid = TokenGrid { tokens: f, height: 1, width: 1 };
        let one = g.constant(Tensor::ones([1, 2]));
        let y = modulate(&mut g, grid, one, one).unwrap();
        assert_eq!(g.value(y.tokens).data(), &[3.0, 5.0]);

        let zero = g.constant(Tensor::zeros([1, 2]));
        let y = modulate(&mut g, grid, zero, zero).unwrap();
        assert!(g.value(y.tokens).bit_eq(g.value(f)));

        let minus = g.constant(Tensor::full([1, 2], -1.0));
        let beta = g.constant(Tensor::new([1, 2], vec![0.25, -7.0]).unwrap());
        let y = modulate(&mut g, grid, minus, beta).unwrap();
        assert!(g.value(y.tokens).bit_eq(g.value(beta)));

        let short = g.constant(Tensor::zeros([1, 1]));
        assert!(modulate(&mut g, grid, short, zero).is_err());
    }

    /// Delta kernels, zero point-wise weight and no modulation make both
    /// fusion residuals collapse: x_agg = x_r + avg(x_r, x_r, x_r) = 2 x_r.
    #[test]
    fn delta_kernels_double_the_bottleneck() {
        let cfg = SigmaConfig { modulation_enabled: false, ..SigmaConfig::new(10, 3) };
        let mut p = sigma_init(&cfg, 4).unwrap();
        for k in KERNEL_SIZES {
            let delta = Tensor::from_fn([3, k, k], |i| if i % (k * k) == k * k / 2 { 1.0 } else { 0.0 });
            match k {
                3 => p.dw3 = delta,
                5 => p.dw5 = delta,
                _ => p.dw7 = delta,
            }
        }
        p.pw = Tensor::zeros([3, 3]);
        // Identity up-projection on the first three channels exposes GeLU(x_agg).
        p.up.weight = Tensor::from_fn([3, 10], |i| if i / 10 == i % 10 { 1.0 } else { 0.0 });
        let x = random_input(4, 10, 9);

        let mut g = Graph::new();
        let pv = bind(&mut g, &p, "", &|_| false);
        let xv = g.constant(x.clone());
        let normed = nn::layer_norm(&mut g, xv, &pv.ln).unwrap();
        let x_r = nn::linear(&mut g, normed, &pv.down).unwrap();
        let x_r = g.value(x_r).clone();

        let y = run(&p, &cfg, &x, 2, 2);
        for t in 0..4 {
            for c in 0..3 {
                let expect = x.at(&[t, c]) + crate::autodiff::gelu_scalar(2.0 * x_r.at(&[t, c]));
                assert!((y.at(&[t, c]) - expect).abs() < 1e-12);
            }
            for c in 3..10 {
                assert_eq!(y.at(&[t, c]), x.at(&[t, c]));
            }
        }
    }

    #[test]
    fn zero_modulation_matches_disabled_modulation() {
        let cfg = SigmaConfig::new(12, 4);
        let mut p = sigma_init(&cfg, 8).unwrap();
        p.up.weight = Tensor::uniform([4, 12], 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let x = random_input(9, 12, 3);
        let off = SigmaConfig { modulation_enabled: false, ..cfg };
        assert!(run(&p, &cfg, &x, 3, 3).bit_eq(&run(&p, &off, &x, 3, 3)));
    }

    #[test]
    fn ablation_flags_change_the_function() {
        let cfg = SigmaConfig::new(12, 4);
        let mut p = sigma_init(&cfg, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        p.up.weight = Tensor::uniform([4, 12], 0.5, &mut rng);
        p.mod_proj = Tensor::uniform([4, 32], 0.5, &mut rng);
        let x = random_input(9, 12, 3);
        let full = run(&p, &cfg, &x, 3, 3);
        let no_mod = run(&p, &SigmaConfig { modulation_enabled: false, ..cfg }, &x, 3, 3);
        let no_fusion = run(&p, &SigmaConfig { fusion_enabled: false, ..cfg }, &x, 3, 3);
        assert!(full.max_abs_diff(&no_mod) > 1e-6);
        assert!(no_mod.max_abs_diff(&no_fusion) > 1e-6);
    }

    /// Swapping two tokens does not simply swap the outputs: the
    /// convolutions see spatial position.
    #[test]
    fn not_permutation_equivariant() {
        let cfg = SigmaConfig::new(8, 4);
        let mut p = sigma_init(&cfg, 2).unwrap();
        p.up.weight = Tensor::uniform([4, 8], 0.5, &mut ChaCha8Rng::seed_from_u64(4));
        let x = random_input(9, 8, 5);
        let mut swapped = x.clone();
        for c in 0..8 {
            swapped.data_mut().swap(c, 8 * 8 + c);
        }
        let y = run(&p, &cfg, &x, 3, 3);
        let ys = run(&p, &cfg, &swapped, 3, 3);
        let mut ys_back = ys.clone();
        for c in 0..8 {
            ys_back.data_mut().swap(c, 8 * 8 + c);
        }
        assert!(y.max_abs_diff(&ys_back) > 1e-6);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let cfg = SigmaConfig::new(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = sigma_init(&cfg, 3).unwrap();
        p.up.weight = Tensor::uniform([3, 8], 0.5, &mut rng);
        p.up.bias = Some(Tensor::uniform([8], 0.5, &mut rng));
        p.mod_proj = Tensor::uniform([3, 24], 0.3, &mut rng);
        let x = Tensor::uniform([6, 8], 1.0, &mut rng);
        let probe = Tensor::uniform([6, 8], 1.0, &mut rng);

        let leaves: Vec<Tensor> = named_tensors(&p, "").into_iter().map(|(_, t)| t).collect();
        let mut inputs = vec![x];
        inputs.extend(leaves);
        let err = finite_diff_check_many(
            |g, vars| {
                let mut it = vars[1..].iter().copied();
                let pv = p.map_named("", &mut |_, _| it.next().unwrap());
                let y = sigma_forward(g, vars[0], &pv, &cfg, 2, 3)?;
                let pr = g.constant(probe.clone());
                let z = g.mul(y, pr)?;
                Ok(g.sum(z))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
