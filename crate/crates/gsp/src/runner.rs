//! Executes tuning runs over seeds (and λ values) on a bounded worker pool.

use std::time::Instant;

use gsp_core::downstream::Prompt;
use gsp_core::graph::kshot_split_with;
use gsp_core::optim::{tune, LossTrace, Method, TuneTask};
use gsp_core::pretrain::pretrain_dataset;
use gsp_core::prompt::SparsityReport;
use gsp_core::{Dataset, FrozenBackbone};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

/// Environment variable bounding the worker pool.
pub const THREADS_ENV: &str = "GSP_THREADS";

/// Dataset and frozen backbone shared read-only by every run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub backbone: FrozenBackbone,
}

impl Prepared {
    /// Loads the dataset and the backbone, pre-training one if no weights file is named.
    pub fn load(config: &RunConfig) -> Result<Self, CliError> {
        let dataset = config.load_dataset()?;
        let backbone = match &config.backbone {
            Some(path) => FrozenBackbone::load_weights(path).map_err(|e| CliError::Input(e.to_string()))?,
            None => pretrain_dataset(&dataset, &config.pretrain)
                .map_err(CliError::from_pretrain)?
                .backbone,
        };
        Ok(Self { dataset, backbone })
    }
}

/// Outcome of one (method, λ, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SeedRun {
    pub method: Method,
    /// `None` for methods without a penalty.
    pub lambda: Option<f64>,
    /// `None` for methods without a basis.
    pub k: Option<usize>,
    pub seed: u64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub best_epoch: usize,
    pub sparsity: Option<SparsityReport>,
    pub prompt: Prompt,
    pub trace: LossTrace,
    pub wall_ms: u64,
}

pub fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let n: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))
}

/// Runs `method` once per seed for each λ in `lambdas`. Results come back in
/// `lambdas × seeds` order regardless of scheduling; the first failure in
/// that order is reported.
pub fn run_grid(
    prepared: &Prepared,
    config: &RunConfig,
    method: Method,
    lambdas: &[f64],
    pool: &rayon::ThreadPool,
) -> Result<Vec<SeedRun>, CliError> {
    let cells: Vec<(f64, u64)> = lambdas
        .iter()
        .flat_map(|&l| config.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let results: Vec<Result<SeedRun, CliError>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(lambda, seed)| run_one(prepared, config, method, lambda, seed))
            .collect()
    });
    results.into_iter().collect()
}

pub fn run_one(
    prepared: &Prepared,
    config: &RunConfig,
    method: Method,
    lambda: f64,
    seed: u64,
) -> Result<SeedRun, CliError> {
    let start = Instant::now();
    let context = format!("{method} seed {seed} lambda {lambda}");
    let split = kshot_split_with(&prepared.dataset, config.shots, seed, config.split_mode)
        .map_err(|e| CliError::Input(format!("{context}: {e}")))?;
    let task = TuneTask::new(&prepared.dataset, split).map_err(|e| CliError::from_train(e, context.clone()))?;
    let tune_config = config.tune_config(seed, lambda);
    let outcome =
        tune(&task, &prepared.backbone, method, &tune_config).map_err(|e| CliError::from_train(e, context))?;
    Ok(SeedRun {
        method,
        lambda: method.is_sparse().then_some(lambda),
        k: method.uses_basis().then(|| config.basis_count()),
        seed,
        val_accuracy: outcome.val_accuracy,
        test_accuracy: outcome.test_accuracy,
        best_epoch: outcome.best_epoch,
        sparsity: outcome.sparsity,
        prompt: outcome.state.prompt,
        trace: outcome.trace,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}
