//! Comparison PEFT methods and freeze strategies.
//!
//! Baseline hyperparameters that cannot be read off a published count are
//! inferred by inverting it: LoRA rank 64 on query/value, bottleneck width 64
//! for both the sequential adapter and AdaptFormer.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, Result};
use crate::nn::{self, LinearParams};
use crate::params::{fan_in_bound, join, Init, ParamSpec, ParamTree};
use crate::sigma::{sigma_param_count, SigmaConfig};
use crate::tensor::Tensor;
use crate::vit::VitConfig;

pub const LORA_RANK: usize = 64;
pub const LORA_SCALING: f64 = 1.0;
pub const ADAPTER_BOTTLENECK: usize = 64;
pub const ADAPTFORMER_SCALING: f64 = 0.1;

/// Adaptation method together with its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum Method {
    Fixed,
    Bitfit,
    Partial1,
    Full,
    Lora {
        #[serde(default = "lora_rank")]
        rank: usize,
        #[serde(default = "lora_scaling")]
        scaling: f64,
    },
    Adapter {
        #[serde(default = "adapter_bottleneck")]
        bottleneck: usize,
    },
    Adaptformer {
        #[serde(default = "adapter_bottleneck")]
        bottleneck: usize,
        #[serde(default = "adaptformer_scaling")]
        scaling: f64,
    },
    Sigma {
        #[serde(default = "sigma_r")]
        r: usize,
        #[serde(default = "yes")]
        modulation: bool,
        #[serde(default = "yes")]
        fusion: bool,
    },
}

fn lora_rank() -> usize {
    LORA_RANK
}
fn lora_scaling() -> f64 {
    LORA_SCALING
}
fn adapter_bottleneck() -> usize {
    ADAPTER_BOTTLENECK
}
fn adaptformer_scaling() -> f64 {
    ADAPTFORMER_SCALING
}
fn sigma_r() -> usize {
    32
}
fn yes() -> bool {
    true
}

impl Method {
    pub const ALL_NAMES: [&'static str; 8] =
        ["fixed", "bitfit", "partial1", "lora", "adapter", "adaptformer", "sigma", "full"];

    /// Method with default hyperparameters, by name.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "fixed" => Method::Fixed,
            "bitfit" => Method::Bitfit,
            "partial1" => Method::Partial1,
            "full" => Method::Full,
            "lora" => Method::Lora { rank: LORA_RANK, scaling: LORA_SCALING },
            "adapter" => Method::Adapter { bottleneck: ADAPTER_BOTTLENECK },
            "adaptformer" => Method::Adaptformer { bottleneck: ADAPTER_BOTTLENECK, scaling: ADAPTFORMER_SCALING },
            "sigma" => Method::Sigma { r: sigma_r(), modulation: true, fusion: true },
            other => return config_err(format!("unknown method {other:?}")),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Fixed => "fixed",
            Method::Bitfit => "bitfit",
            Method::Partial1 => "partial1",
            Method::Full => "full",
            Method::Lora { .. } => "lora",
            Method::Adapter { .. } => "adapter",
            Method::Adaptformer { .. } => "adaptformer",
            Method::Sigma { .. } => "sigma",
        }
    }

    pub fn freeze_strategy(&self) -> FreezeStrategy {
        match self {
            Method::Fixed => FreezeStrategy::Fixed,
            Method::Bitfit => FreezeStrategy::BitFit,
            Method::Partial1 => FreezeStrategy::Partial1,
            Method::Full => FreezeStrategy::Full,
            _ => FreezeStrategy::AdapterOnly,
        }
    }

    pub fn sigma_config(&self, d: usize) -> Option<SigmaConfig> {
        match *self {
            Method::Sigma { r, modulation, fusion } => {
                Some(SigmaConfig { d, r, modulation_enabled: modulation, fusion_enabled: fusion })
            }
            _ => None,
        }
    }

    /// Hyperparameters whose values were inferred from published counts
    /// rather than stated, as `field=value` strings.
    pub fn inferred_hyperparameters(&self) -> Vec<String> {
        match *self {
            Method::Lora { rank, .. } => vec![format!("lora.rank={rank}"), "lora.targets=query,value".into()],
            Method::Adapter { bottleneck } => vec![format!("adapter.bottleneck={bottleneck}")],
            Method::Adaptformer { bottleneck, scaling } => {
                vec![format!("adaptformer.bottleneck={bottleneck}"), format!("adaptformer.scaling={scaling}")]
            }
            _ => Vec::new(),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match *self {
            Method::Lora { rank, .. } if rank == 0 || rank >= d => {
                config_err(format!("LoRA rank {rank} must satisfy 0 < rank < d={d}"))
            }
            Method::Adapter { bottleneck } | Method::Adaptformer { bottleneck, .. } if bottleneck == 0 => {
                config_err("bottleneck width must be positive")
            }
            Method::Sigma { .. } => self.sigma_config(d).unwrap().validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeStrategy {
    Fixed,
    BitFit,
    Partial1,
    Full,
    AdapterOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraParams<T = Tensor> {
    /// `[d, rank]`
    pub a: T,
    /// `[rank, d]`, zero at init.
    pub b: T,
    pub rank: usize,
    pub scaling: f64,
    pub target: LoraTarget,
}

impl LoraParams<ParamSpec> {
    pub fn layout(d: usize, rank: usize, scaling: f64, target: LoraTarget) -> Self {
        Self {
            a: ParamSpec::new([d, rank], Init::Uniform(fan_in_bound(d))),
            b: ParamSpec::new([rank, d], Init::Zeros),
            rank,
            scaling,
            target,
        }
    }
}

impl<T> ParamTree for LoraParams<T> {
    type Leaf = T;
    type Mapped<U> = LoraParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LoraParams<U> {
        LoraParams {
            a: f(&join(prefix, "a"), &self.a),
            b: f(&join(prefix, "b"), &self.b),
            rank: self.rank,
            scaling: self.scaling,
            target: self.target,
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "a"), &mut self.a);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// `x · W + scaling · (x · a) · b`.
pub fn lora_forward(g: &mut Graph, x: Var, frozen: &LinearParams<Var>, lp: &LoraParams<Var>) -> Result<Var> {
    let d = g.shape(x)[1];
    if lp.rank >= d {
        return config_err(format!("LoRA rank {} must be below d={d}", lp.rank));
    }
    let base = nn::linear(g, x, frozen)?;
    let low = g.matmul(x, lp.a)?;
    let delta = g.matmul(low, lp.b)?;
    let delta = g.scale(delta, lp.scaling);
    g.add(base, delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// `x + Up(GeLU(Down(x)))` on the residual stream after MHA and FFN.
    Sequential,
    /// `scaling · Up(GeLU(Down(x)))` added alongside the FFN branch.
    ParallelFfn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckAdapterParams<T = Tensor> {
    pub down: LinearParams<T>,
    pub up: LinearParams<T>,
    pub placement: Placement,
    pub scaling: f64,
}

impl BottleneckAdapterParams<ParamSpec> {
    pub fn layout(d: usize, bottleneck: usize, placement: Placement, scaling: f64) -> Self {
        Self {
            down: LinearParams::layout(d, bottleneck, true),
            up: LinearParams::zeros(bottleneck, d, true),
            placement,
            scaling,
        }
    }
}

impl<T> ParamTree for BottleneckAdapterParams<T> {
    type Leaf = T;
    type Mapped<U> = BottleneckAdapterParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> BottleneckAdapterParams<U> {
        BottleneckAdapterParams {
            down: self.down.map_named(&join(prefix, "down"), f),
            up: self.up.map_named(&join(prefix, "up"), f),
            placement: self.placement,
            scaling: self.scaling,
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.down.visit_mut(&join(prefix, "down"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
    }
}

/// `Up(GeLU(Down(x)))`, scaled by `scaling` for the parallel placement.
pub fn bottleneck_branch(g: &mut Graph, x: Var, p: &BottleneckAdapterParams<Var>) -> Result<Var> {
    let h = nn::linear(g, x, &p.down)?;
    let h = nn::gelu(g, h);
    let y = nn::linear(g, h, &p.up)?;
    Ok(match p.placement {
        Placement::Sequential => y,
        Placement::ParallelFfn => g.scale(y, p.scaling),
    })
}

/// Sequential adapter: `x + Up(GeLU(Down(x)))`.
pub fn bottleneck_forward(g: &mut Graph, x: Var, p: &BottleneckAdapterParams<Var>) -> Result<Var> {
    let y = bottleneck_branch(g, x, p)?;
    g.add(x, y)
}

pub fn is_adapter_name(name: &str) -> bool {
    name.split('.').any(|seg| seg.starts_with("adapter_") || seg.starts_with("lora_"))
}

pub fn is_head_name(name: &str) -> bool {
    name.starts_with("head.")
}

fn block_index(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?.split('.').next()?.parse().ok()
}

/// Frozen/trainable split of a model's named parameters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParameterPartition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl ParameterPartition {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    /// Moves a parameter to the frozen side.
    pub fn freeze(&mut self, name: &str) {
        if self.trainable.remove(name) {
            self.frozen.insert(name.to_string());
        }
    }
}

/// Splits named parameters by strategy. The task head is trainable only
/// under [`FreezeStrategy::Full`].
pub fn apply_freeze<'a>(names: impl IntoIterator<Item = &'a str>, strategy: FreezeStrategy) -> Result<ParameterPartition> {
    let names: Vec<&str> = names.into_iter().collect();
    let unique: BTreeSet<&str> = names.iter().copied().collect();
    if unique.len() != names.len() {
        return config_err("parameter names are not unique");
    }
    let last_block = names.iter().filter_map(|n| block_index(n)).max();
    let has_adapters = names.iter().any(|n| is_adapter_name(n));
    let select: Box<dyn Fn(&str) -> bool> = match strategy {
        FreezeStrategy::Fixed => Box::new(|_| false),
        FreezeStrategy::Full => Box::new(|_| true),
        FreezeStrategy::BitFit => Box::new(|n| n.ends_with(".bias") && !is_head_name(n) && !is_adapter_name(n)),
        FreezeStrategy::Partial1 => {
            let Some(last) = last_block else {
                return config_err("partial1 needs at least one transformer block");
            };
            Box::new(move |n| block_index(n) == Some(last) && !is_adapter_name(n))
        }
        FreezeStrategy::AdapterOnly => {
            if !has_adapters {
                return config_err("adapter-only freezing on a model without adapters");
            }
            Box::new(is_adapter_name)
        }
    };
    let mut part = ParameterPartition::default();
    for n in names {
        if select(n) {
            part.trainable.insert(n.to_string());
        } else {
            part.frozen.insert(n.to_string());
        }
    }
    Ok(part)
}

/// Closed-form trainable scalar count of a method on a backbone.
pub fn baseline_param_count(method: &Method, vit: &VitConfig) -> Result<u64> {
    method.validate(vit.d)?;
    let d = vit.d as u64;
    let hidden = vit.mlp_hidden() as u64;
    let depth = vit.depth as u64;
    let block = 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d) + 4 * d;
    Ok(match *method {
        Method::Fixed => 0,
        // attention biases, fc1/fc2 biases, two LN biases per block; patch
        // embedding bias; final norm bias.
        Method::Bitfit => depth * (4 * d + hidden + d + 2 * d) + 2 * d,
        Method::Partial1 => {
            if depth == 0 {
                return config_err("partial1 needs at least one transformer block");
            }
            block
        }
        Method::Full => vit.total_params() as u64,
        Method::Lora { rank, .. } => depth * 2 * (2 * d * rank as u64),
        Method::Adapter { bottleneck } => depth * 2 * (2 * d * bottleneck as u64 + d + bottleneck as u64),
        Method::Adaptformer { bottleneck, .. } => depth * (2 * d * bottleneck as u64 + d + bottleneck as u64),
        Method::Sigma { r, modulation, fusion } => {
            let r = r as u64;
            let mut per_layer = sigma_param_count(d, r);
            if !fusion {
                per_layer -= 8 * r * r + 83 * r + r * r;
            } else if !modulation {
                per_layer -= 8 * r * r;
            }
            depth * 2 * per_layer
        }
    })
}
