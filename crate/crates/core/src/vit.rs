//! Plain pre-norm ViT with adapter insertion after MHA and after FFN, and a
//! per-token classification head upsampled to pixels.
//!
//! Backbone weights are random with a fixed seed and stand in for
//! pre-trained ones. No class token: every token is a patch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::baselines::{
    self, apply_freeze, bottleneck_branch, bottleneck_forward, lora_forward, BottleneckAdapterParams, LoraParams,
    LoraTarget, Method, ParameterPartition, Placement,
};
use crate::error::{config_err, dim_err, Result};
use crate::nn::{self, AttentionParams, LayerNormParams, LinearParams};
use crate::params::{self, join, materialize, Init, ParamSpec, ParamTree};
use crate::sigma::{sigma_forward, SigmaParams};
use crate::tensor::Tensor;
use crate::train::checkpoint::{fingerprint, Fingerprint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub depth: usize,
    pub d: usize,
    pub heads: usize,
    #[serde(default = "mlp_ratio")]
    pub mlp_ratio: f64,
    pub patch: usize,
    pub image_hw: (usize, usize),
    #[serde(default = "channels")]
    pub channels: usize,
    pub num_classes: usize,
}

fn mlp_ratio() -> f64 {
    4.0
}

fn channels() -> usize {
    3
}

impl VitConfig {
    /// Desk-scale default: depth 4, d 64, 4 heads, 4-pixel patches, 32×32.
    pub fn toy() -> Self {
        Self { depth: 4, d: 64, heads: 4, mlp_ratio: 4.0, patch: 4, image_hw: (32, 32), channels: 3, num_classes: 4 }
    }

    /// ViT-B/16 shape at 224×224, used for parameter audits only.
    pub fn vit_b_audit() -> Self {
        Self {
            depth: 12,
            d: 768,
            heads: 12,
            mlp_ratio: 4.0,
            patch: 16,
            image_hw: (224, 224),
            channels: 3,
            num_classes: 150,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_hw;
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return config_err(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.patch == 0 || h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return config_err(format!("image {h}x{w} not divisible into {}-pixel patches", self.patch));
        }
        if self.num_classes < 2 || self.channels == 0 {
            return config_err("need at least two classes and one channel");
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return config_err(format!("mlp_ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_hw.0 / self.patch, self.image_hw.1 / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.d as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Scalars in the backbone without the task head.
    pub fn backbone_params(&self) -> usize {
        let layout = VitParams::layout(self, &Method::Fixed).expect("valid config");
        let mut n = 0;
        layout.visit("", &mut |name, s| {
            if !baselines::is_head_name(name) {
                n += s.numel();
            }
        });
        n
    }

    /// Scalars in backbone plus head.
    pub fn total_params(&self) -> usize {
        params::count_scalars(&VitParams::layout(self, &Method::Fixed).expect("valid config"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdapterParams<T = Tensor> {
    Sigma(SigmaParams<T>),
    Bottleneck(BottleneckAdapterParams<T>),
}

impl<T> ParamTree for AdapterParams<T> {
    type Leaf = T;
    type Mapped<U> = AdapterParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> AdapterParams<U> {
        match self {
            AdapterParams::Sigma(p) => AdapterParams::Sigma(p.map_named(prefix, f)),
            AdapterParams::Bottleneck(p) => AdapterParams::Bottleneck(p.map_named(prefix, f)),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        match self {
            AdapterParams::Sigma(p) => p.visit_mut(prefix, f),
            AdapterParams::Bottleneck(p) => p.visit_mut(prefix, f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    pub ln1: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
    pub lora_q: Option<LoraParams<T>>,
    pub lora_v: Option<LoraParams<T>>,
    pub adapter_mha: Option<AdapterParams<T>>,
    pub adapter_ffn: Option<AdapterParams<T>>,
}

impl<T> ParamTree for BlockParams<T> {
    type Leaf = T;
    type Mapped<U> = BlockParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> BlockParams<U> {
        BlockParams {
            ln1: self.ln1.map_named(&join(prefix, "ln1"), f),
            attn: self.attn.map_named(&join(prefix, "attn"), f),
            ln2: self.ln2.map_named(&join(prefix, "ln2"), f),
            fc1: self.fc1.map_named(&join(prefix, "fc1"), f),
            fc2: self.fc2.map_named(&join(prefix, "fc2"), f),
            lora_q: self.lora_q.as_ref().map(|p| p.map_named(&join(prefix, "lora_q"), f)),
            lora_v: self.lora_v.as_ref().map(|p| p.map_named(&join(prefix, "lora_v"), f)),
            adapter_mha: self.adapter_mha.as_ref().map(|p| p.map_named(&join(prefix, "adapter_mha"), f)),
            adapter_ffn: self.adapter_ffn.as_ref().map(|p| p.map_named(&join(prefix, "adapter_ffn"), f)),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        if let Some(p) = &mut self.lora_q {
            p.visit_mut(&join(prefix, "lora_q"), f);
        }
        if let Some(p) = &mut self.lora_v {
            p.visit_mut(&join(prefix, "lora_v"), f);
        }
        if let Some(p) = &mut self.adapter_mha {
            p.visit_mut(&join(prefix, "adapter_mha"), f);
        }
        if let Some(p) = &mut self.adapter_ffn {
            p.visit_mut(&join(prefix, "adapter_ffn"), f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitParams<T = Tensor> {
    /// `[channels·patch², d]`
    pub patch_embed: LinearParams<T>,
    /// `[tokens, d]`
    pub pos_embed: T,
    pub blocks: Vec<BlockParams<T>>,
    pub norm: LayerNormParams<T>,
    /// `[d, num_classes]`
    pub head: LinearParams<T>,
}

impl<T> ParamTree for VitParams<T> {
    type Leaf = T;
    type Mapped<U> = VitParams<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> VitParams<U> {
        VitParams {
            patch_embed: self.patch_embed.map_named(&join(prefix, "patch_embed"), f),
            pos_embed: f(&join(prefix, "pos_embed"), &self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map_named(&join(prefix, &format!("blocks.{i}")), f))
                .collect(),
            norm: self.norm.map_named(&join(prefix, "norm"), f),
            head: self.head.map_named(&join(prefix, "head"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// LeCun-style uniform bound `sqrt(3 / fan_in)` for the stand-in pretrained weights.
fn backbone_init(fan_in: usize) -> Init {
    Init::Uniform((3.0 / fan_in as f64).sqrt())
}

impl VitParams<ParamSpec> {
    pub fn layout(cfg: &VitConfig, method: &Method) -> Result<Self> {
        cfg.validate()?;
        method.validate(cfg.d)?;
        let d = cfg.d;
        let hidden = cfg.mlp_hidden();
        let adapter = || -> Option<AdapterParams<ParamSpec>> {
            match *method {
                Method::Sigma { .. } => {
                    Some(AdapterParams::Sigma(SigmaParams::layout(&method.sigma_config(d).unwrap())))
                }
                Method::Adapter { bottleneck } => Some(AdapterParams::Bottleneck(BottleneckAdapterParams::layout(
                    d,
                    bottleneck,
                    Placement::Sequential,
                    1.0,
                ))),
                _ => None,
            }
        };
        let lora = |target| match *method {
            Method::Lora { rank, scaling } => Some(LoraParams::layout(d, rank, scaling, target)),
            _ => None,
        };
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                ln1: LayerNormParams::layout(d),
                attn: AttentionParams::layout(d, cfg.heads, backbone_init(d)),
                ln2: LayerNormParams::layout(d),
                fc1: LinearParams::layout_with(d, hidden, true, backbone_init(d)),
                fc2: LinearParams::layout_with(hidden, d, true, backbone_init(hidden)),
                lora_q: lora(LoraTarget::Query),
                lora_v: lora(LoraTarget::Value),
                adapter_mha: adapter(),
                adapter_ffn: match *method {
                    Method::Adaptformer { bottleneck, scaling } => Some(AdapterParams::Bottleneck(
                        BottleneckAdapterParams::layout(d, bottleneck, Placement::ParallelFfn, scaling),
                    )),
                    _ => adapter(),
                },
            })
            .collect();
        Ok(VitParams {
            patch_embed: LinearParams::layout_with(cfg.patch_dim(), d, true, backbone_init(cfg.patch_dim())),
            pos_embed: ParamSpec::new([cfg.tokens(), d], Init::Uniform(0.1)),
            blocks,
            norm: LayerNormParams::layout(d),
            head: LinearParams::layout_with(d, cfg.num_classes, true, backbone_init(d)),
        })
    }
}

/// Backbone, task head and adapters with concrete values.
#[derive(Clone, Debug)]
pub struct VitModel {
    pub config: VitConfig,
    pub method: Method,
    /// Seed the weights were drawn from.
    pub seed: u64,
    pub params: VitParams,
}

impl VitModel {
    /// Backbone and head weights depend only on `(config, seed)`, so models
    /// for different methods share the same frozen backbone.
    pub fn new(config: VitConfig, method: Method, seed: u64) -> Result<Self> {
        let layout = VitParams::layout(&config, &method)?;
        let params = materialize(&layout, "", seed);
        Ok(Self { config, method, seed, params })
    }

    /// Identifies the architecture, method and frozen weights a checkpoint belongs to.
    pub fn fingerprint(&self) -> Result<Fingerprint> {
        fingerprint(&serde_json::json!({
            "backbone": self.config,
            "method": self.method,
            "seed": self.seed,
        }))
    }

    pub fn layout(&self) -> VitParams<ParamSpec> {
        VitParams::layout(&self.config, &self.method).expect("validated at construction")
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        params::named_tensors(&self.params, "")
    }

    pub fn partition(&self) -> Result<ParameterPartition> {
        partition_for(&self.layout(), &self.method, self.config.d)
    }

    pub fn bind(&self, g: &mut Graph, partition: &ParameterPartition) -> VitParams<Var> {
        params::bind(g, &self.params, "", &|n| partition.is_trainable(n))
    }

    /// Per-pixel logits `[num_classes, H, W]` for one image `[C, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &VitParams<Var>, image: &Tensor) -> Result<Var> {
        backbone_forward(g, &self.config, &self.method, p, image)
    }

    /// Forward pass with nothing tracked.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params::bind(&mut g, &self.params, "", &|_| false);
        let out = self.forward(&mut g, &p, image)?;
        Ok(g.value(out).clone())
    }
}

/// Trainable split for a method. Adapter leaves that an ablation switches
/// off do not join the trainable set.
pub fn partition_for(layout: &VitParams<ParamSpec>, method: &Method, d: usize) -> Result<ParameterPartition> {
    let names = layout.names("");
    let mut part = apply_freeze(names.iter().map(String::as_str), method.freeze_strategy())?;
    if let Some(sc) = method.sigma_config(d) {
        for n in &names {
            let leaf = n.rsplit('.').next().unwrap_or_default();
            let leaf = match leaf {
                "weight" | "bias" | "gain" => continue,
                other => other,
            };
            if !sc.uses(leaf) {
                part.freeze(n);
            }
        }
    }
    Ok(part)
}

/// Exact trainable scalar count of a layout under a partition.
pub fn count_trainable(layout: &VitParams<ParamSpec>, partition: &ParameterPartition) -> u64 {
    let mut n = 0u64;
    layout.visit("", &mut |name, s| {
        if partition.is_trainable(name) {
            n += s.numel() as u64;
        }
    });
    n
}

/// `[C, H, W]` → `[tokens, C·patch²]`, patch vectors ordered (channel, row, col).
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let [c, h, w] = match image.shape() {
        &[c, h, w] => [c, h, w],
        s => return dim_err(format!("image must be [C, H, W], got {s:?}")),
    };
    if h % patch != 0 || w % patch != 0 {
        return dim_err(format!("{h}x{w} image not divisible into {patch}-pixel patches"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let src = image.data();
    let mut out = vec![0.0; gh * gw * pd];
    for ti in 0..gh {
        for tj in 0..gw {
            let row = &mut out[(ti * gw + tj) * pd..(ti * gw + tj + 1) * pd];
            for ch in 0..c {
                for py in 0..patch {
                    for px in 0..patch {
                        row[(ch * patch + py) * patch + px] = src[(ch * h + ti * patch + py) * w + tj * patch + px];
                    }
                }
            }
        }
    }
    Tensor::new([gh * gw, pd], out)
}

fn apply_adapter(g: &mut Graph, x: Var, a: &AdapterParams<Var>, method: &Method, cfg: &VitConfig) -> Result<Var> {
    let (gh, gw) = cfg.grid();
    match a {
        AdapterParams::Sigma(p) => {
            let sc = method.sigma_config(cfg.d).expect("sigma adapter implies sigma method");
            sigma_forward(g, x, p, &sc, gh, gw)
        }
        AdapterParams::Bottleneck(p) => bottleneck_forward(g, x, p),
    }
}

/// `u = x + MHA(LN1(x))`, `u' = A_mha(u)`, `v = u' + FFN(LN2(u'))`,
/// output `A_ffn(v)`. A parallel bottleneck adds its branch to `v` instead.
pub fn block_forward(g: &mut Graph, x: Var, bp: &BlockParams<Var>, method: &Method, cfg: &VitConfig) -> Result<Var> {
    let n = g.shape(x)[0];
    if g.shape(x) != [cfg.tokens(), cfg.d] {
        return dim_err(format!("block input {:?} for {} tokens of width {}", g.shape(x), cfg.tokens(), cfg.d));
    }
    debug_assert_eq!(n, cfg.tokens());
    let h = nn::layer_norm(g, x, &bp.ln1)?;
    let q = match &bp.lora_q {
        Some(l) => lora_forward(g, h, &bp.attn.wq, l)?,
        None => nn::linear(g, h, &bp.attn.wq)?,
    };
    let k = nn::linear(g, h, &bp.attn.wk)?;
    let v = match &bp.lora_v {
        Some(l) => lora_forward(g, h, &bp.attn.wv, l)?,
        None => nn::linear(g, h, &bp.attn.wv)?,
    };
    let attn = nn::attend(g, q, k, v, &bp.attn)?;
    let mut u = g.add(x, attn)?;
    if let Some(a) = &bp.adapter_mha {
        u = apply_adapter(g, u, a, method, cfg)?;
    }

    let h = nn::layer_norm(g, u, &bp.ln2)?;
    let h = nn::linear(g, h, &bp.fc1)?;
    let h = nn::gelu(g, h);
    let ffn = nn::linear(g, h, &bp.fc2)?;
    let mut out = g.add(u, ffn)?;
    match &bp.adapter_ffn {
        Some(AdapterParams::Bottleneck(p)) if p.placement == Placement::ParallelFfn => {
            let branch = bottleneck_branch(g, u, p)?;
            out = g.add(out, branch)?;
        }
        Some(a) => out = apply_adapter(g, out, a, method, cfg)?,
        None => {}
    }
    Ok(out)
}

/// Patchify → embed → blocks → norm → per-token head → nearest upsample.
pub fn backbone_forward(g: &mut Graph, cfg: &VitConfig, method: &Method, p: &VitParams<Var>, image: &Tensor) -> Result<Var> {
    let (h, w) = cfg.image_hw;
    if image.shape() != [cfg.channels, h, w] {
        return dim_err(format!("image {:?} for config [{}, {h}, {w}]", image.shape(), cfg.channels));
    }
    let patches = g.constant(patchify(image, cfg.patch)?);
    let x = nn::linear(g, patches, &p.patch_embed)?;
    let mut x = g.add(x, p.pos_embed)?;
    for bp in &p.blocks {
        x = block_forward(g, x, bp, method, cfg)?;
    }
    let x = nn::layer_norm(g, x, &p.norm)?;
    let logits = nn::linear(g, x, &p.head)?;
    let (gh, gw) = cfg.grid();
    g.upsample_tokens(logits, gh, gw, cfg.patch)
}
