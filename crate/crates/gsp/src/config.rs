//! Run configuration: one JSON file, with command-line flags layered on top.

use std::path::{Path, PathBuf};

use gsp_core::graph::{load_dataset, synthesize_sbm, LoadOptions, SbmConfig, SplitMode};
use gsp_core::optim::{Method, ProxScaling, TuneConfig};
use gsp_core::pretrain::PretrainConfig;
use gsp_core::Dataset;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Sweep grid used when the config names none.
pub const DEFAULT_LAMBDA_GRID: [f64; 8] = [0.0, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset file. Exactly one of `dataset` and `synthetic` must be set.
    pub dataset: Option<PathBuf>,
    pub synthetic: Option<SbmConfig>,
    pub load_options: LoadOptions,
    /// Pre-trained weights. When absent a backbone is pre-trained on the
    /// dataset with `pretrain`.
    pub backbone: Option<PathBuf>,
    pub pretrain: PretrainConfig,
    pub method: Method,
    /// Penalty weight; only meaningful for `gsfp` and `gsmfp`.
    pub lambda: Option<f64>,
    /// Basis size; only meaningful for `gpfplus` and `gsmfp`.
    pub k: Option<usize>,
    pub lambda_grid: Option<Vec<f64>>,
    pub eta: f64,
    pub epochs: usize,
    pub head_lr: Option<f64>,
    pub weight_decay: f64,
    pub prox_scaling: ProxScaling,
    pub decay_prompts: bool,
    pub adapter_trainable: bool,
    pub zero_threshold: f64,
    /// Labeled training items per class.
    pub shots: usize,
    pub split_mode: SplitMode,
    /// One run per seed; the seed drives both the split and the initialization.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub plots: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tune = TuneConfig::default();
        Self {
            dataset: None,
            synthetic: None,
            load_options: LoadOptions::default(),
            backbone: None,
            pretrain: PretrainConfig::default(),
            method: Method::Gsfp,
            lambda: None,
            k: None,
            lambda_grid: None,
            eta: tune.eta,
            epochs: tune.epochs,
            head_lr: tune.head_lr,
            weight_decay: tune.weight_decay,
            prox_scaling: tune.prox_scaling,
            decay_prompts: tune.decay_prompts,
            adapter_trainable: tune.adapter_trainable,
            zero_threshold: tune.zero_threshold,
            shots: 1,
            split_mode: SplitMode::Global,
            seeds: vec![0, 1, 2, 3, 4],
            out: PathBuf::from("gsp-out"),
            plots: false,
        }
    }
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub method: Option<Method>,
    pub plots: bool,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_str(&text).map_err(|e| {
            CliError::Config(format!(
                "{}: line {}, column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        // relative paths inside the config resolve against its directory
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.dataset, &mut config.backbone].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(lambda) = o.lambda {
            self.lambda = Some(lambda);
        }
        if let Some(method) = o.method {
            self.method = method;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.plots |= o.plots;
    }

    /// Checks everything that does not need the dataset.
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Config(m));
        match (&self.dataset, &self.synthetic) {
            (None, None) => return fail("no dataset: set `dataset` (a file) or `synthetic`".into()),
            (Some(_), Some(_)) => return fail("set only one of `dataset` and `synthetic`".into()),
            _ => {}
        }
        if self.lambda.is_some() && !self.method.is_sparse() {
            return fail(format!("lambda applies only to gsfp and gsmfp, not {}", self.method));
        }
        if self.k.is_some() && !self.method.uses_basis() {
            return fail(format!("k applies only to gpfplus and gsmfp, not {}", self.method));
        }
        if self.k == Some(0) {
            return fail("k must be at least 1".into());
        }
        if let Some(grid) = &self.lambda_grid {
            if grid.is_empty() {
                return fail("lambda grid is empty".into());
            }
            if let Some(bad) = grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
                return fail(format!("lambda grid entry {bad} is not a finite value >= 0"));
            }
        }
        if self.seeds.is_empty() {
            return fail("seeds list is empty".into());
        }
        if self.shots == 0 {
            return fail("shots must be at least 1".into());
        }
        self.tune_config(self.seeds[0], self.lambda.unwrap_or(0.0))
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn tune_config(&self, seed: u64, lambda: f64) -> TuneConfig {
        TuneConfig {
            lambda,
            eta: self.eta,
            epochs: self.epochs,
            head_lr: self.head_lr,
            weight_decay: self.weight_decay,
            seed,
            prox_scaling: self.prox_scaling,
            basis_count: self.basis_count(),
            decay_prompts: self.decay_prompts,
            adapter_trainable: self.adapter_trainable,
            zero_threshold: self.zero_threshold,
        }
    }

    pub fn basis_count(&self) -> usize {
        self.k.unwrap_or(TuneConfig::default().basis_count)
    }

    /// The sweep grid, sorted ascending.
    pub fn grid(&self) -> Vec<f64> {
        let mut grid = self.lambda_grid.clone().unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        grid
    }

    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        match (&self.dataset, &self.synthetic) {
            (Some(path), _) => load_dataset(path, &self.load_options).map_err(|e| CliError::Input(e.to_string())),
            (None, Some(sbm)) => synthesize_sbm(sbm).map_err(|e| CliError::Config(e.to_string())),
            (None, None) => Err(CliError::Config("no dataset configured".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic() -> RunConfig {
        RunConfig {
            synthetic: Some(SbmConfig::new(vec![5, 5], 0.5, 0.1, 4, 0)),
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_validate_once_data_is_named() {
        assert!(RunConfig::default().validate().is_err());
        synthetic().validate().unwrap();
    }

    #[test]
    fn method_parameter_compatibility() {
        let gpf_with_lambda = RunConfig {
            method: Method::Gpf,
            lambda: Some(0.1),
            ..synthetic()
        };
        assert!(gpf_with_lambda.validate().is_err());
        let gsfp_with_k = RunConfig { k: Some(4), ..synthetic() };
        assert!(gsfp_with_k.validate().is_err());
        let gsmfp = RunConfig {
            method: Method::Gsmfp,
            k: Some(4),
            lambda: Some(0.1),
            ..synthetic()
        };
        gsmfp.validate().unwrap();
        let head_only = RunConfig {
            method: Method::FtHeadOnly,
            k: Some(2),
            ..synthetic()
        };
        assert!(head_only.validate().is_err());
    }

    #[test]
    fn overrides_win() {
        let mut c = synthetic();
        c.apply(&Overrides {
            seed: Some(9),
            lambda: Some(0.5),
            method: Some(Method::Gsmfp),
            plots: true,
            out: Some("x".into()),
        });
        assert_eq!(c.seeds, vec![9]);
        assert_eq!(c.lambda, Some(0.5));
        assert_eq!(c.method, Method::Gsmfp);
        assert!(c.plots);
        assert_eq!(c.out, PathBuf::from("x"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"lamda": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("lamda"));
    }

    #[test]
    fn grid_is_sorted_and_deduplicated() {
        let c = RunConfig {
            lambda_grid: Some(vec![0.1, 0.0, 0.1, 1e-3]),
            ..synthetic()
        };
        assert_eq!(c.grid(), vec![0.0, 1e-3, 0.1]);
        assert_eq!(synthetic().grid(), DEFAULT_LAMBDA_GRID.to_vec());
    }
}
