//! Training loop, evaluation and adapter-only checkpoints.

pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::baselines::ParameterPartition;
use crate::error::{config_err, dim_err, Error, Result};
use crate::params::ParamTree;
use crate::vit::VitModel;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{gen_task, ChannelShift, SyntheticDenseTask, TaskConfig};
pub use metrics::{argmax_classes, Confusion, Metrics};
pub use optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Training metrics are recorded every `log_every` steps and at the last step.
    #[serde(default = "log_every")]
    pub log_every: usize,
}

fn log_every() -> usize {
    25
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 0.01, betas: (0.9, 0.999), steps: 300, batch: 8, seed: 0, log_every: 25 }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, betas: self.betas, ..AdamWConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        if self.steps == 0 || self.batch == 0 || self.log_every == 0 {
            return config_err("steps, batch and log_every must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Training-batch metrics at each logged step.
    pub history: Vec<Metrics>,
    /// Held-out metrics after the last step.
    pub final_eval: Metrics,
    pub checkpoint: Checkpoint,
}

fn check_dims(model: &VitModel, task: &SyntheticDenseTask) -> Result<()> {
    let s = task.images.shape();
    let cfg = &model.config;
    if s[1..] != [cfg.channels, cfg.image_hw.0, cfg.image_hw.1] || task.classes != cfg.num_classes {
        return dim_err(format!(
            "task images {:?} with {} classes for a model expecting [{}, {}, {}] and {} classes",
            &s[1..],
            task.classes,
            cfg.channels,
            cfg.image_hw.0,
            cfg.image_hw.1,
            cfg.num_classes
        ));
    }
    Ok(())
}

/// SHA-256 over the names and bytes of every frozen tensor.
pub fn frozen_hash(model: &VitModel, partition: &ParameterPartition) -> [u8; 32] {
    let mut h = Sha256::new();
    model.params.visit("", &mut |name, t| {
        if !partition.is_trainable(name) {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
    });
    h.finalize().into()
}

/// Trainable tensors of `model` packed with its fingerprint.
pub fn make_checkpoint(model: &VitModel, partition: &ParameterPartition) -> Result<Checkpoint> {
    let tensors = model.named_tensors().into_iter().filter(|(n, _)| partition.is_trainable(n)).collect();
    Ok(Checkpoint { tensors, fingerprint: model.fingerprint()? })
}

/// Writes checkpoint tensors into `model` after checking the fingerprint and
/// that every stored name is a trainable leaf of matching shape.
pub fn apply_checkpoint(model: &mut VitModel, ck: &Checkpoint) -> Result<()> {
    ck.check_fingerprint(&model.fingerprint()?)?;
    let partition = model.partition()?;
    let stored: std::collections::BTreeMap<&str, &crate::Tensor> =
        ck.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    if let Some(n) = stored.keys().find(|n| !partition.is_trainable(n)) {
        return Err(Error::Format(format!("checkpoint tensor {n} is not trainable in this model")));
    }
    if let Some(n) = partition.trainable.iter().find(|n| !stored.contains_key(n.as_str())) {
        return Err(Error::Format(format!("checkpoint lacks {n}")));
    }
    let mut err = None;
    model.params.visit_mut("", &mut |name, t| {
        if let Some(src) = stored.get(name) {
            if src.shape() != t.shape() {
                err.get_or_insert_with(|| Error::Format(format!("{name}: stored {:?}, model {:?}", src.shape(), t.shape())));
            } else {
                *t = (*src).clone();
            }
        }
    });
    err.map_or(Ok(()), Err)
}

/// Mean cross-entropy, accuracy and mIoU over the whole task.
pub fn evaluate(model: &VitModel, task: &SyntheticDenseTask) -> Result<Metrics> {
    check_dims(model, task)?;
    let mut conf = Confusion::new(task.classes);
    let mut loss = 0.0;
    for i in 0..task.len() {
        let mut g = Graph::new();
        let p = crate::params::bind(&mut g, &model.params, "", &|_| false);
        let logits = model.forward(&mut g, &p, &task.image(i))?;
        let l = g.cross_entropy(logits, task.labels_of(i))?;
        loss += g.value(l).data()[0];
        conf.add(&argmax_classes(g.value(logits)), task.labels_of(i))?;
    }
    Ok(Metrics {
        step: 0,
        loss: loss / task.len() as f64,
        pixel_accuracy: conf.pixel_accuracy(),
        mean_iou: conf.mean_iou(),
    })
}

/// Per-sample index order: a fresh shuffle of the training set every epoch.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { rng: ChaCha8Rng::seed_from_u64(seed ^ 0xba7c_4e5), order: (0..n).collect(), pos: n };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.refill();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// AdamW on per-pixel cross-entropy over the trainable partition, then an
/// evaluation on `eval` and an adapter-only checkpoint.
pub fn train(
    model: &mut VitModel,
    train_set: &SyntheticDenseTask,
    eval: &SyntheticDenseTask,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    check_dims(model, train_set)?;
    check_dims(model, eval)?;
    let partition = model.partition()?;
    let mut opt = AdamW::new(tcfg.optimizer())?;
    let mut sampler = Sampler::new(train_set.len(), tcfg.seed);
    let mut history = Vec::new();
    let has_trainable = !partition.trainable.is_empty();

    for step in 1..=tcfg.steps {
        let idx = sampler.batch(tcfg.batch);
        let mut g = Graph::new();
        let p = model.bind(&mut g, &partition);
        let mut conf = Confusion::new(train_set.classes);
        let mut total: Option<Var> = None;
        for &i in &idx {
            let logits = model.forward(&mut g, &p, &train_set.image(i))?;
            let l = g.cross_entropy(logits, train_set.labels_of(i))?;
            conf.add(&argmax_classes(g.value(logits)), train_set.labels_of(i))?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let loss = g.scale(total.expect("batch is non-empty"), 1.0 / idx.len() as f64);
        let loss_value = g.value(loss).data()[0];
        let metrics =
            Metrics { step, loss: loss_value, pixel_accuracy: conf.pixel_accuracy(), mean_iou: conf.mean_iou() };
        if !loss_value.is_finite() {
            let last = history.last().map(|m: &Metrics| format!("{m:?}")).unwrap_or_else(|| "none".into());
            return Err(Error::Numeric(format!("loss diverged at step {step}; last finite metrics: {last}")));
        }
        if has_trainable {
            let mut grads = g.backward(loss)?;
            let mut by_name = std::collections::BTreeMap::new();
            let mut missing = None;
            p.visit("", &mut |name, v| {
                if partition.is_trainable(name) {
                    match grads.take(*v) {
                        Some(t) => {
                            by_name.insert(name.to_string(), t);
                        }
                        None => missing = Some(name.to_string()),
                    }
                }
            });
            if let Some(n) = missing {
                return Err(Error::Contract(format!("trainable parameter {n} received no gradient")));
            }
            opt.step_tree(&mut model.params, &by_name)?;
        }
        if step % tcfg.log_every == 0 || step == tcfg.steps {
            history.push(metrics);
        }
    }

    let mut final_eval = evaluate(model, eval)?;
    final_eval.step = tcfg.steps;
    let checkpoint = make_checkpoint(model, &partition)?;
    Ok(TrainOutcome { history, final_eval, checkpoint })
}
