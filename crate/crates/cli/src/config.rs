//! Experiment configuration: schema, defaults and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sigma_core::baselines::Method;
use sigma_core::train::{TaskConfig, TrainConfig};
use sigma_core::vit::VitConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Consecutive seeds starting at the command's `--seed`.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_r_sweep")]
    pub r_sweep: Vec<usize>,
    /// Backbone for the r-sweep. Every swept r must stay below its width.
    /// Defaults to a wider two-block variant of the toy backbone when absent
    /// from the config; `null` sweeps on `backbone` itself.
    #[serde(default = "default_sweep_backbone_opt")]
    pub sweep_backbone: Option<VitConfig>,
}

fn default_seeds() -> usize {
    5
}

fn default_r_sweep() -> Vec<usize> {
    vec![16, 32, 64]
}

/// The toy width is 64, so r=64 needs a wider backbone. Two blocks keep
/// the sweep within the same budget as the toy ablation.
pub fn default_sweep_backbone() -> VitConfig {
    VitConfig { depth: 2, d: 128, heads: 4, ..VitConfig::toy() }
}

fn default_sweep_backbone_opt() -> Option<VitConfig> {
    Some(default_sweep_backbone())
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: default_seeds(), r_sweep: default_r_sweep(), sweep_backbone: Some(default_sweep_backbone()) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: VitConfig,
    pub method: Method,
    pub train: TrainConfig,
    pub task: TaskConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            backbone: VitConfig::toy(),
            method: Method::by_name("sigma").expect("known method"),
            train: TrainConfig::default(),
            task: TaskConfig::shifted_multiscale(),
            ablation: AblationConfig::default(),
        }
    }
}

fn field<T>(path: &str, r: sigma_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::config(path, e.to_string()))
}

impl ExperimentConfig {
    /// Parses JSON, reporting the path of the first field that fails to
    /// deserialize, then runs [`ExperimentConfig::validate`].
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(if path == "." { "<root>" } else { &path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("<file>", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let b = &self.backbone;
        field("backbone", b.validate())?;
        field("method", self.method.validate(b.d))?;
        field("train", self.train.validate())?;
        field("task", self.task.validate())?;
        if self.task.classes != b.num_classes {
            return Err(CliError::config(
                "task.classes",
                format!("{} classes but backbone.num_classes is {}", self.task.classes, b.num_classes),
            ));
        }
        if self.task.image_hw != b.image_hw {
            return Err(CliError::config("task.image_hw", format!("{:?} vs backbone {:?}", self.task.image_hw, b.image_hw)));
        }
        if self.task.channels != b.channels {
            return Err(CliError::config("task.channels", format!("{} vs backbone {}", self.task.channels, b.channels)));
        }
        if self.task.train_size == 0 || self.task.eval_size == 0 {
            return Err(CliError::config("task.train_size", "train and eval sets must be non-empty"));
        }
        if self.ablation.seeds == 0 {
            return Err(CliError::config("ablation.seeds", "at least one seed"));
        }
        let sweep = self.sweep_backbone();
        if let Some(sb) = &self.ablation.sweep_backbone {
            field("ablation.sweep_backbone", sb.validate())?;
            if sb.image_hw != b.image_hw || sb.num_classes != b.num_classes || sb.channels != b.channels {
                return Err(CliError::config(
                    "ablation.sweep_backbone",
                    "image size, channels and classes must match the backbone",
                ));
            }
        }
        if let Some(&r) = self.ablation.r_sweep.iter().find(|&&r| r == 0 || r >= sweep.d) {
            return Err(CliError::config("ablation.r_sweep", format!("r={r} must satisfy 0 < r < d={}", sweep.d)));
        }
        Ok(())
    }

    pub fn sweep_backbone(&self) -> VitConfig {
        self.ablation.sweep_backbone.clone().unwrap_or_else(|| self.backbone.clone())
    }

    /// Key-sorted JSON echo.
    pub fn canonical(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
