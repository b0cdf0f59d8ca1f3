//! One seeded training run from an experiment config.

use serde::Serialize;
use sigma_core::baselines::Method;
use sigma_core::train::{self, gen_task, Metrics, SyntheticDenseTask, TrainConfig, TrainOutcome};
use sigma_core::vit::{VitConfig, VitModel};

use crate::{CliError, ExperimentConfig};

/// Eval images come from a stream disjoint from the training stream.
const EVAL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn datasets(cfg: &ExperimentConfig, seed: u64) -> Result<(SyntheticDenseTask, SyntheticDenseTask), CliError> {
    let train_set = gen_task(&cfg.task, seed, cfg.task.train_size)?;
    let eval = gen_task(&cfg.task, seed ^ EVAL_SALT, cfg.task.eval_size)?;
    Ok((train_set, eval))
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub trainable_params: u64,
    pub final_eval: Metrics,
    pub frozen_unchanged: bool,
    pub checkpoint_tensors: usize,
    pub checkpoint_bytes: usize,
}

pub struct Run {
    pub model: VitModel,
    pub outcome: TrainOutcome,
    pub summary: RunSummary,
}

/// Trains `method` on `backbone` for one seed. The seed drives backbone and
/// adapter init, data generation and batch order.
pub fn run(cfg: &ExperimentConfig, backbone: &VitConfig, method: &Method, seed: u64) -> Result<Run, CliError> {
    let (train_set, eval) = datasets(cfg, seed)?;
    let mut model = VitModel::new(backbone.clone(), method.clone(), seed)?;
    let partition = model.partition()?;
    let before = train::frozen_hash(&model, &partition);
    let tcfg = TrainConfig { seed, ..cfg.train.clone() };
    let outcome = train::train(&mut model, &train_set, &eval, &tcfg)?;
    let after = train::frozen_hash(&model, &partition);
    let bytes = outcome.checkpoint.to_bytes()?.len();
    let summary = RunSummary {
        method: method.name().to_string(),
        seed,
        trainable_params: sigma_core::vit::count_trainable(&model.layout(), &partition),
        final_eval: outcome.final_eval,
        frozen_unchanged: before == after,
        checkpoint_tensors: outcome.checkpoint.tensors.len(),
        checkpoint_bytes: bytes,
    };
    Ok(Run { model, outcome, summary })
}

/// Runs `job` for every item on a pool of at most [`crate::seed_threads`]
/// workers, returning results in input order.
pub fn parallel<T, R, F>(items: &[T], job: F) -> Result<Vec<R>, CliError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, CliError> + Sync,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(crate::seed_threads().min(items.len().max(1)))
        .build()
        .map_err(|e| CliError::failed(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&job).collect::<Vec<_>>()).into_iter().collect()
}
