//! Synthetic dense-prediction task: coloured discs of several radii on a
//! background, per-image illumination, pixel noise and a per-channel affine
//! shift applied after labelling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// Per-channel `x ↦ scale · x + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelShift {
    pub scale: f64,
    pub offset: f64,
}

impl ChannelShift {
    pub const IDENTITY: Self = Self { scale: 1.0, offset: 0.0 };

    pub fn new(scale: f64, offset: f64) -> Self {
        Self { scale, offset }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub image_hw: (usize, usize),
    #[serde(default = "channels")]
    pub channels: usize,
    pub classes: usize,
    pub radii: Vec<usize>,
    /// One entry per channel, or a single entry broadcast to all channels.
    pub shift: Vec<ChannelShift>,
    /// Standard deviation of i.i.d. Gaussian pixel noise before the shift.
    #[serde(default)]
    pub noise: f64,
    /// Per-image brightness gain drawn uniformly from `[1 - g, 1 + g]`.
    #[serde(default)]
    pub illumination: f64,
    pub train_size: usize,
    pub eval_size: usize,
}

fn channels() -> usize {
    3
}

impl TaskConfig {
    /// The shifted multi-scale task used for the toy ViT.
    pub fn shifted_multiscale() -> Self {
        Self {
            image_hw: (32, 32),
            channels: 3,
            classes: 4,
            radii: vec![4, 8, 12],
            shift: vec![ChannelShift::new(2.0, 0.5), ChannelShift::new(-1.5, -0.3), ChannelShift::new(0.6, 1.0)],
            noise: 0.6,
            illumination: 0.5,
            train_size: 256,
            eval_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_hw;
        if h == 0 || w == 0 || self.channels == 0 {
            return config_err("image extents and channels must be positive");
        }
        if self.classes < 2 {
            return config_err(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.radii.is_empty() {
            return config_err("radii must be non-empty");
        }
        if let Some(&r) = self.radii.iter().find(|&&r| r == 0 || 2 * r > h.min(w)) {
            return config_err(format!("blob radius {r} does not fit a {h}x{w} image"));
        }
        if self.shift.len() != 1 && self.shift.len() != self.channels {
            return config_err(format!("{} shift entries for {} channels", self.shift.len(), self.channels));
        }
        if self.shift.iter().any(|s| s.scale == 0.0 || !s.scale.is_finite() || !s.offset.is_finite()) {
            return config_err("shift scales must be finite and non-zero");
        }
        if !(self.noise >= 0.0) || !(0.0..1.0).contains(&self.illumination) {
            return config_err("noise must be >= 0 and illumination in [0, 1)");
        }
        Ok(())
    }

    fn shift_for(&self, ch: usize) -> ChannelShift {
        self.shift[if self.shift.len() == 1 { 0 } else { ch }]
    }
}

/// Images `[n, C, H, W]` with integer labels `[n, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDenseTask {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub radii: Vec<usize>,
    pub shift: Vec<ChannelShift>,
}

impl SyntheticDenseTask {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn pixels(&self) -> usize {
        let s = self.images.shape();
        s[2] * s[3]
    }

    pub fn image(&self, i: usize) -> Tensor {
        let s = self.images.shape();
        let len = s[1] * s[2] * s[3];
        Tensor::new(&s[1..], self.images.data()[i * len..(i + 1) * len].to_vec()).expect("stored shape")
    }

    pub fn labels_of(&self, i: usize) -> &[usize] {
        let p = self.pixels();
        &self.labels[i * p..(i + 1) * p]
    }

    /// Pixel count per class over the whole set.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Class colours, shared by every dataset drawn for the same class count.
pub fn class_prototypes(classes: usize, channels: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c01_0u64 ^ classes as u64);
    (0..classes).map(|_| (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn draw_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: usize, radii: &[usize]) -> Vec<usize> {
    const MAX_BLOBS: usize = 64;
    let mut labels = vec![0usize; h * w];
    let target = h * w / classes;
    let mut background = h * w;
    let mut blobs = 0;
    while background > target && blobs < MAX_BLOBS {
        let class = rng.gen_range(1..classes);
        let r = radii[rng.gen_range(0..radii.len())] as isize;
        let cy = rng.gen_range(0..h) as isize;
        let cx = rng.gen_range(0..w) as isize;
        for y in (cy - r).max(0)..(cy + r + 1).min(h as isize) {
            for x in (cx - r).max(0)..(cx + r + 1).min(w as isize) {
                if (y - cy).pow(2) + (x - cx).pow(2) <= r * r {
                    let l = &mut labels[y as usize * w + x as usize];
                    if *l == 0 {
                        background -= 1;
                    }
                    *l = class;
                }
            }
        }
        blobs += 1;
    }
    labels
}

/// Deterministic in `(seed, cfg)`; `n` images.
pub fn gen_task(cfg: &TaskConfig, seed: u64, n: usize) -> Result<SyntheticDenseTask> {
    cfg.validate()?;
    if n == 0 {
        return config_err("dataset must contain at least one image");
    }
    let (h, w) = cfg.image_hw;
    let c = cfg.channels;
    let protos = class_prototypes(cfg.classes, c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 {
        // Box-Muller; u1 is kept away from zero.
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let mut images = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n * h * w);
    for _ in 0..n {
        let lab = draw_labels(&mut rng, h, w, cfg.classes, &cfg.radii);
        let gain = 1.0 + cfg.illumination * rng.gen_range(-1.0..=1.0);
        for ch in 0..c {
            let s = cfg.shift_for(ch);
            for &l in &lab {
                let clean = gain * protos[l][ch] + cfg.noise * normal(&mut rng);
                images.push(s.scale * clean + s.offset);
            }
        }
        labels.extend(lab);
    }
    Ok(SyntheticDenseTask {
        images: Tensor::new([n, c, h, w], images)?,
        labels,
        classes: cfg.classes,
        radii: cfg.radii.clone(),
        shift: cfg.shift.clone(),
    })
}
