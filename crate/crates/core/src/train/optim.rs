//! AdamW with decoupled weight decay over named tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    #[serde(default = "eps")]
    pub eps: f64,
}

fn eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 0.01, betas: (0.9, 0.999), eps: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return config_err(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) {
            return config_err("weight_decay >= 0, betas in [0, 1) and eps > 0 required");
        }
        Ok(())
    }
}

/// Decay applies to weight matrices and convolution kernels only. Gains,
/// biases, position embeddings and the modulation projection are exempt.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    matches!(leaf, "weight" | "dw3" | "dw5" | "dw7" | "pw" | "a" | "b")
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, state: BTreeMap::new() })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn check(name: &str, p: &Tensor, g: &Tensor) -> Result<()> {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!("{name}: gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
        Ok(())
    }

    fn apply(&mut self, name: &str, p: &mut Tensor, g: &Tensor) {
        let AdamWConfig { lr, weight_decay, betas: (b1, b2), eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let st = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| Moments { m: vec![0.0; g.numel()], v: vec![0.0; g.numel()] });
        let wd = if decays(name) { weight_decay } else { 0.0 };
        for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
            let update = (*m / c1) / ((*v / c2).sqrt() + eps);
            *w -= lr * (update + wd * *w);
        }
    }

    /// Updates every `(name, param)` with its gradient. All gradients are
    /// checked before any parameter moves, so a NaN aborts the whole step.
    pub fn step<'a>(&mut self, updates: impl IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>) -> Result<()> {
        let updates: Vec<_> = updates.into_iter().collect();
        for (name, p, g) in &updates {
            Self::check(name, p, g)?;
        }
        self.step += 1;
        for (name, p, g) in updates {
            self.apply(name, p, g);
        }
        Ok(())
    }

    /// Same as [`AdamW::step`] over the leaves of a parameter tree that have
    /// an entry in `grads`. Every gradient must name an existing leaf.
    pub fn step_tree<P>(&mut self, params: &mut P, grads: &BTreeMap<String, Tensor>) -> Result<()>
    where
        P: ParamTree<Leaf = Tensor>,
    {
        let mut seen = 0;
        let mut err = None;
        params.visit("", &mut |name, p| {
            if let Some(g) = grads.get(name) {
                seen += 1;
                if err.is_none() {
                    err = Self::check(name, p, g).err();
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != grads.len() {
            return Err(Error::Contract(format!("{} gradients do not match any parameter", grads.len() - seen)));
        }
        self.step += 1;
        params.visit_mut("", &mut |name, p| {
            if let Some(g) = grads.get(name) {
                self.apply(name, p, g);
            }
        });
        Ok(())
    }
}
