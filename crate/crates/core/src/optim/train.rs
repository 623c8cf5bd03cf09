//! Prompt-tuning loops.
//!
//! Each epoch takes one full-batch gradient of the training loss, then
//!
//! 1. steps the prompt (`p` or `P`) and, for the sparse methods, applies the
//!    matching proximal operator;
//! 2. steps the head parameters (classifier, attention projections `B`,
//!    optionally the adapter) by gradient descent with weight decay.
//!
//! Both steps use gradients from the same forward pass. With `λ = 0` the
//! proximal operators are the identity, so `gsfp`/`gsmfp` trace exactly the
//! same parameters as `gpf`/`gpfplus`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prox::{l1_norm, l21_norm, nonzero_rows, prox_l1_in_place, prox_l21_in_place, ProxError};
use crate::backbone::FrozenBackbone;
use crate::downstream::{build_logits, evaluate, predict, DownstreamError, HeadParams, Prompt};
use crate::graph::{Dataset, FewShotSplit, GraphBatch, GraphError};
use crate::prompt::{basis_sparsity, scores, vector_sparsity, PromptBasis, PromptVector, SparsityReport};
use crate::tensor::{DenseMatrix, Tape, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid tuning config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: non-finite loss or parameters")]
    Divergence { epoch: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Downstream(#[from] DownstreamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prox(#[from] ProxError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Gpf,
    Gpfplus,
    Gsfp,
    Gsmfp,
    FtHeadOnly,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Gpf,
        Method::Gpfplus,
        Method::Gsfp,
        Method::Gsmfp,
        Method::FtHeadOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gpf => "gpf",
            Method::Gpfplus => "gpfplus",
            Method::Gsfp => "gsfp",
            Method::Gsmfp => "gsmfp",
            Method::FtHeadOnly => "ft-head-only",
        }
    }

    /// Whether the prompt is a `k`-vector basis.
    pub fn uses_basis(self) -> bool {
        matches!(self, Method::Gpfplus | Method::Gsmfp)
    }

    /// Whether `λ` applies.
    pub fn is_sparse(self) -> bool {
        matches!(self, Method::Gsfp | Method::Gsmfp)
    }

    pub fn has_prompt(self) -> bool {
        self != Method::FtHeadOnly
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?} (expected gpf, gpfplus, gsfp, gsmfp or ft-head-only)"))
    }
}

/// Threshold used by the proximal step after a gradient step of size `η`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ProxScaling {
    /// `Prox_λ`, threshold `λ` regardless of `η`.
    #[default]
    PaperLiteral,
    /// `Prox_{ηλ}`, the textbook forward-backward step.
    StepScaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct TuneConfig {
    pub lambda: f64,
    /// Learning rate `η` of the prompt step.
    pub eta: f64,
    pub epochs: usize,
    /// Head learning rate; `None` shares `η`.
    pub head_lr: Option<f64>,
    pub weight_decay: f64,
    pub seed: u64,
    pub prox_scaling: ProxScaling,
    /// Number of basis vectors `k` for `gpfplus`/`gsmfp`.
    pub basis_count: usize,
    /// Apply weight decay to the prompt as well as the head.
    pub decay_prompts: bool,
    pub adapter_trainable: bool,
    /// Magnitude at or below which a prompt entry is reported as zero.
    pub zero_threshold: f64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            eta: 1e-3,
            epochs: 200,
            head_lr: None,
            weight_decay: 5e-4,
            seed: 0,
            prox_scaling: ProxScaling::PaperLiteral,
            basis_count: 10,
            decay_prompts: false,
            adapter_trainable: false,
            zero_threshold: 0.0,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return fail(format!("eta must be > 0, got {}", self.eta));
        }
        if let Some(lr) = self.head_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("head learning rate must be > 0, got {lr}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.basis_count == 0 {
            return fail("basis count k must be at least 1".into());
        }
        if self.zero_threshold.is_nan() || self.zero_threshold < 0.0 {
            return fail("zero threshold must be >= 0".into());
        }
        Ok(())
    }

    pub fn head_lr(&self) -> f64 {
        self.head_lr.unwrap_or(self.eta)
    }

    /// Threshold handed to the proximal operator.
    pub fn prox_threshold(&self) -> f64 {
        match self.prox_scaling {
            ProxScaling::PaperLiteral => self.lambda,
            ProxScaling::StepScaled => self.eta * self.lambda,
        }
    }
}

/// Everything that changes during tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableState {
    pub prompt: Prompt,
    pub head: HeadParams,
}

/// Gradients of the mean training cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub prompt_vector: Option<DenseMatrix>,
    pub basis_p: Option<DenseMatrix>,
    pub basis_b: Option<DenseMatrix>,
    pub classifier: DenseMatrix,
    pub adapter: Option<DenseMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochRecord {
    pub epoch: usize,
    pub data_loss: f64,
    pub regularizer: f64,
    pub objective: f64,
    /// Nonzero entries of `p`, or nonzero rows of `P`; zero for head-only tuning.
    pub prompt_nonzeros: usize,
    pub val_accuracy: Option<f64>,
}

/// One record per epoch, measured before that epoch's update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<EpochRecord>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }
}

/// Proximal step input and output, reported to observers.
#[derive(Debug)]
pub struct ProxEvent<'a> {
    pub epoch: usize,
    pub threshold: f64,
    /// Prompt after the gradient step (`1 × d` for a vector prompt).
    pub input: &'a DenseMatrix,
    pub output: &'a DenseMatrix,
}

pub trait TrainObserver {
    fn on_prox(&mut self, _event: &ProxEvent<'_>) {}
    fn on_epoch_end(&mut self, _epoch: usize, _state: &TrainableState) {}
}

impl TrainObserver for () {}

/// Prepared inputs for tuning on one split.
#[derive(Debug, Clone)]
pub struct TuneTask {
    pub batch: GraphBatch,
    pub labels: Vec<Option<usize>>,
    pub classes: usize,
    pub split: FewShotSplit,
    train_ids: Arc<[usize]>,
    train_labels: Arc<[usize]>,
}

impl TuneTask {
    pub fn new(dataset: &Dataset, split: FewShotSplit) -> Result<Self, TrainError> {
        let batch = GraphBatch::from_dataset(dataset)?;
        let labels = dataset.item_labels();
        let mut train_labels = Vec::with_capacity(split.train.len());
        for &id in split.train.iter().chain(&split.val).chain(&split.test) {
            if id >= labels.len() {
                return Err(DownstreamError::IdOutOfRange { id, len: labels.len() }.into());
            }
        }
        for &id in &split.train {
            train_labels.push(labels[id].ok_or(DownstreamError::Unlabeled(id))?);
        }
        if train_labels.is_empty() {
            return Err(TrainError::Config("training split is empty".into()));
        }
        Ok(Self {
            batch,
            labels,
            classes: dataset.classes(),
            train_ids: Arc::from(split.train.clone()),
            train_labels: Arc::from(train_labels),
            split,
        })
    }

    /// Width of the raw input features.
    pub fn raw_dim(&self) -> usize {
        self.batch.features.cols()
    }

    /// Seeded starting point: classifier (and adapter if needed) first, then the prompt.
    pub fn initial_state(
        &self,
        backbone: &FrozenBackbone,
        method: Method,
        config: &TuneConfig,
    ) -> TrainableState {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let head = HeadParams::init(
            backbone,
            self.raw_dim(),
            self.classes,
            config.adapter_trainable,
            &mut rng,
        );
        let dim = backbone.input_dim();
        let prompt = match method {
            Method::FtHeadOnly => Prompt::None,
            Method::Gpf | Method::Gsfp => Prompt::Vector(PromptVector::zeros(dim)),
            Method::Gpfplus | Method::Gsmfp => {
                Prompt::Basis(PromptBasis::init(dim, config.basis_count, &mut rng))
            }
        };
        TrainableState { prompt, head }
    }

    /// Mean training cross-entropy at `state`.
    pub fn data_loss(&self, backbone: &FrozenBackbone, state: &TrainableState) -> Result<f64, TrainError> {
        let mut tape = Tape::new();
        let nodes = build_logits(&mut tape, backbone, &self.batch, &state.head, &state.prompt, false)?;
        let train = tape.gather_rows(nodes.logits, &self.train_ids)?;
        let loss = tape.softmax_cross_entropy(train, &self.train_labels)?;
        Ok(tape.scalar(loss)?)
    }

    /// Training loss, its gradients, and the logits of every item.
    pub fn loss_and_gradients(
        &self,
        backbone: &FrozenBackbone,
        state: &TrainableState,
    ) -> Result<(f64, Gradients, DenseMatrix), TrainError> {
        let mut tape = Tape::new();
        let nodes = build_logits(&mut tape, backbone, &self.batch, &state.head, &state.prompt, true)?;
        let train = tape.gather_rows(nodes.logits, &self.train_ids)?;
        let loss = tape.softmax_cross_entropy(train, &self.train_labels)?;

        let mut leaves = vec![nodes.classifier];
        leaves.extend(nodes.prompt_vector);
        leaves.extend(nodes.basis_p);
        leaves.extend(nodes.basis_b);
        let adapter_leaf = nodes.adapter.filter(|&a| tape.is_leaf(a));
        leaves.extend(adapter_leaf);

        let mut grads = tape.backward(loss, &leaves)?.into_iter();
        let mut next = |present: bool| present.then(|| grads.next().expect("one gradient per leaf"));
        let classifier = next(true).expect("classifier gradient");
        let gradients = Gradients {
            classifier,
            prompt_vector: next(nodes.prompt_vector.is_some()),
            basis_p: next(nodes.basis_p.is_some()),
            basis_b: next(nodes.basis_b.is_some()),
            adapter: next(adapter_leaf.is_some()),
        };
        Ok((tape.scalar(loss)?, gradients, tape.value(nodes.logits).clone()))
    }

    /// Penalty term `λ‖p‖₁` or `λ‖P‖₂,₁`; zero for unregularized methods.
    pub fn regularizer(method: Method, state: &TrainableState, lambda: f64) -> f64 {
        if !method.is_sparse() {
            return 0.0;
        }
        match &state.prompt {
            Prompt::Vector(p) => lambda * l1_norm(p.values()),
            Prompt::Basis(b) => lambda * l21_norm(&b.p),
            Prompt::None => 0.0,
        }
    }

    /// Sparsity of the prompt in `state`; `None` for head-only tuning.
    pub fn sparsity(&self, state: &TrainableState, threshold: f64) -> Result<Option<SparsityReport>, TrainError> {
        Ok(match &state.prompt {
            Prompt::None => None,
            Prompt::Vector(p) => Some(vector_sparsity(p, threshold)),
            Prompt::Basis(basis) => {
                let inputs = match &state.head.adapter {
                    Some(a) => self.batch.features.matmul(a)?,
                    None => self.batch.features.clone(),
                };
                Some(basis_sparsity(basis, &scores(&inputs, basis)?, threshold)?)
            }
        })
    }

    fn accuracy(&self, logits: &DenseMatrix, ids: &[usize]) -> Result<Option<f64>, TrainError> {
        if ids.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluate(logits, &self.labels, ids)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TuneOutcome {
    pub method: Method,
    /// Parameters at the best-validation snapshot.
    pub state: TrainableState,
    pub trace: LossTrace,
    /// Number of updates applied before the snapshot was taken.
    pub best_epoch: usize,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub sparsity: Option<SparsityReport>,
}

impl TuneOutcome {
    pub fn prompt_vector(&self) -> Option<&PromptVector> {
        match &self.state.prompt {
            Prompt::Vector(p) => Some(p),
            _ => None,
        }
    }

    pub fn prompt_basis(&self) -> Option<&PromptBasis> {
        match &self.state.prompt {
            Prompt::Basis(b) => Some(b),
            _ => None,
        }
    }
}

pub fn tune(
    task: &TuneTask,
    backbone: &FrozenBackbone,
    method: Method,
    config: &TuneConfig,
) -> Result<TuneOutcome, TrainError> {
    tune_observed(task, backbone, method, config, &mut ())
}

/// Runs `config.epochs` epochs and returns the snapshot with the best
/// validation accuracy (earliest on ties) among the states reached after at
/// least one update. Without a validation set the final parameters are returned.
pub fn tune_observed(
    task: &TuneTask,
    backbone: &FrozenBackbone,
    method: Method,
    config: &TuneConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TuneOutcome, TrainError> {
    config.validate()?;
    let mut state = task.initial_state(backbone, method, config);
    let mut trace = LossTrace::default();
    let mut best: Option<(f64, usize, TrainableState)> = None;
    let keep_best = |best: &mut Option<(f64, usize, TrainableState)>, acc: Option<f64>, epoch: usize, s: &TrainableState| {
        if let Some(acc) = acc {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                *best = Some((acc, epoch, s.clone()));
            }
        }
    };

    for epoch in 0..config.epochs {
        let (data_loss, grads, logits) = task
            .loss_and_gradients(backbone, &state)
            .map_err(|e| divergence_or(e, epoch))?;
        if !data_loss.is_finite() {
            return Err(TrainError::Divergence { epoch });
        }
        let val_accuracy = task.accuracy(&logits, &task.split.val)?;
        let regularizer = TuneTask::regularizer(method, &state, config.lambda);
        trace.records.push(EpochRecord {
            epoch,
            data_loss,
            regularizer,
            objective: data_loss + regularizer,
            prompt_nonzeros: prompt_nonzeros(&state.prompt),
            val_accuracy,
        });
        if epoch > 0 {
            keep_best(&mut best, val_accuracy, epoch, &state);
        }

        step(&mut state, &grads, method, config, epoch, observer)?;
        observer.on_epoch_end(epoch, &state);
    }

    let logits = predict(backbone, &state.head, &task.batch, &state.prompt)
        .map_err(|e| divergence_or(e.into(), config.epochs))?;
    keep_best(&mut best, task.accuracy(&logits, &task.split.val)?, config.epochs, &state);

    let (val_accuracy, best_epoch, state) = match best {
        Some((acc, epoch, s)) => (Some(acc), epoch, s),
        None => (None, config.epochs, state),
    };
    let logits = predict(backbone, &state.head, &task.batch, &state.prompt)?;
    let test_accuracy = task.accuracy(&logits, &task.split.test)?;
    let sparsity = task.sparsity(&state, config.zero_threshold)?;
    Ok(TuneOutcome {
        method,
        state,
        trace,
        best_epoch,
        val_accuracy,
        test_accuracy,
        sparsity,
    })
}

fn step(
    state: &mut TrainableState,
    grads: &Gradients,
    method: Method,
    config: &TuneConfig,
    epoch: usize,
    observer: &mut dyn TrainObserver,
) -> Result<(), TrainError> {
    let eta = config.eta;
    let head_lr = config.head_lr();
    let prompt_decay = if config.decay_prompts { config.weight_decay } else { 0.0 };
    let threshold = config.prox_threshold();

    match &mut state.prompt {
        Prompt::None => {}
        Prompt::Vector(p) => {
            let mut y = p.to_row();
            descend(&mut y, grads.prompt_vector.as_ref().expect("prompt gradient"), eta, prompt_decay)?;
            if method.is_sparse() {
                let before = y.clone();
                prox_l1_in_place(y.values_mut(), threshold)?;
                observer.on_prox(&ProxEvent {
                    epoch,
                    threshold,
                    input: &before,
                    output: &y,
                });
            }
            *p = PromptVector::from_row(&y).map_err(|_| TrainError::Divergence { epoch })?;
        }
        Prompt::Basis(basis) => {
            descend(&mut basis.p, grads.basis_p.as_ref().expect("basis gradient"), eta, prompt_decay)?;
            if method.is_sparse() {
                let before = basis.p.clone();
                prox_l21_in_place(&mut basis.p, threshold)?;
                observer.on_prox(&ProxEvent {
                    epoch,
                    threshold,
                    input: &before,
                    output: &basis.p,
                });
            }
            descend(
                &mut basis.b,
                grads.basis_b.as_ref().expect("projection gradient"),
                head_lr,
                config.weight_decay,
            )?;
        }
    }

    descend(&mut state.head.classifier, &grads.classifier, head_lr, config.weight_decay)?;
    if let (Some(a), Some(g)) = (state.head.adapter.as_mut(), grads.adapter.as_ref()) {
        descend(a, g, head_lr, config.weight_decay)?;
    }

    let finite = match &state.prompt {
        Prompt::None => true,
        Prompt::Vector(p) => p.values().iter().all(|v| v.is_finite()),
        Prompt::Basis(b) => b.p.is_finite() && b.b.is_finite(),
    } && state.head.classifier.is_finite()
        && state.head.adapter.as_ref().is_none_or(DenseMatrix::is_finite);
    if !finite {
        return Err(TrainError::Divergence { epoch });
    }
    Ok(())
}

/// `w ← w − lr · (g + decay · w)`.
fn descend(w: &mut DenseMatrix, g: &DenseMatrix, lr: f64, decay: f64) -> Result<(), TensorError> {
    if decay == 0.0 {
        return w.add_scaled(g, -lr);
    }
    let mut full = g.clone();
    full.add_scaled(w, decay)?;
    w.add_scaled(&full, -lr)
}

fn prompt_nonzeros(prompt: &Prompt) -> usize {
    match prompt {
        Prompt::None => 0,
        Prompt::Vector(p) => p.values().iter().filter(|&&v| v != 0.0).count(),
        Prompt::Basis(b) => nonzero_rows(&b.p),
    }
}

fn divergence_or(e: TrainError, epoch: usize) -> TrainError {
    match e {
        TrainError::Tensor(TensorError::NonFinite { .. })
        | TrainError::Downstream(DownstreamError::Tensor(TensorError::NonFinite { .. }))
        | TrainError::Downstream(DownstreamError::Backbone(crate::backbone::BackboneError::Tensor(
            TensorError::NonFinite { .. },
        ))) => TrainError::Divergence { epoch },
        other => other,
    }
}

/// Sparse single-prompt tuning (`gsfp`).
pub fn train_gsfp(
    dataset: &Dataset,
    split: &FewShotSplit,
    backbone: &FrozenBackbone,
    config: &TuneConfig,
) -> Result<TuneOutcome, TrainError> {
    let task = TuneTask::new(dataset, split.clone())?;
    tune(&task, backbone, Method::Gsfp, config)
}

/// Sparse basis-prompt tuning (`gsmfp`) with `k` basis vectors.
pub fn train_gsmfp(
    dataset: &Dataset,
    split: &FewShotSplit,
    backbone: &FrozenBackbone,
    config: &TuneConfig,
    k: usize,
) -> Result<TuneOutcome, TrainError> {
    let task = TuneTask::new(dataset, split.clone())?;
    let config = TuneConfig {
        basis_count: k,
        ..config.clone()
    };
    tune(&task, backbone, Method::Gsmfp, &config)
}
