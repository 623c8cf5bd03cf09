//! Task head, prompted forward pass, accuracy and run aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{uniform_matrix, BackboneError, FrozenBackbone};
use crate::graph::GraphBatch;
use crate::prompt::{gpf_prompt, gpfplus_prompt, PromptBasis, PromptVector};
use crate::tensor::{DenseMatrix, Tape, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum DownstreamError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("no items to evaluate")]
    EmptyIds,
    #[error("item {0} has no label")]
    Unlabeled(usize),
    #[error("item {id} out of range for {len} items")]
    IdOutOfRange { id: usize, len: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Trainable downstream parameters: the classifier and, optionally, the
/// feature adapter in front of the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HeadParams {
    /// `d_raw × d_in`; `None` when raw features already match the backbone.
    pub adapter: Option<DenseMatrix>,
    pub adapter_trainable: bool,
    /// `d_emb × classes`.
    pub classifier: DenseMatrix,
}

impl HeadParams {
    /// Classifier uniform in `[-1/√d_emb, 1/√d_emb]`. The adapter is copied
    /// from the backbone when it fits `raw_dim`, omitted when `raw_dim`
    /// already equals the backbone input width, and otherwise drawn uniform
    /// in `[-1/√d_raw, 1/√d_raw]`.
    pub fn init<R: Rng>(
        backbone: &FrozenBackbone,
        raw_dim: usize,
        classes: usize,
        adapter_trainable: bool,
        rng: &mut R,
    ) -> Self {
        let emb = backbone.output_dim();
        let classifier = uniform_matrix(emb, classes, 1.0 / (emb as f64).sqrt(), rng);
        let adapter = match backbone.adapter() {
            Some(a) if a.rows() == raw_dim => Some(a.clone()),
            _ if raw_dim == backbone.input_dim() => None,
            _ => Some(uniform_matrix(
                raw_dim,
                backbone.input_dim(),
                1.0 / (raw_dim as f64).sqrt(),
                rng,
            )),
        };
        Self {
            adapter,
            adapter_trainable,
            classifier,
        }
    }

    pub fn classes(&self) -> usize {
        self.classifier.cols()
    }
}

/// The prompt in front of the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Prompt {
    None,
    Vector(PromptVector),
    Basis(PromptBasis),
}

/// Tape nodes created by [`build_logits`].
#[derive(Debug, Clone)]
pub struct ModelNodes {
    /// One row per item (node or graph).
    pub logits: Var,
    /// Features after the adapter, before prompting.
    pub inputs: Var,
    pub prompt_vector: Option<Var>,
    pub basis_p: Option<Var>,
    pub basis_b: Option<Var>,
    pub classifier: Var,
    pub adapter: Option<Var>,
}

/// Records adapter → prompt → backbone → (readout) → classifier on `tape`.
///
/// With `trainable` set, the prompt, classifier and (if flagged) adapter are
/// leaves; otherwise everything is constant. Backbone weights are always constant.
pub fn build_logits(
    tape: &mut Tape,
    backbone: &FrozenBackbone,
    batch: &GraphBatch,
    head: &HeadParams,
    prompt: &Prompt,
    trainable: bool,
) -> Result<ModelNodes, DownstreamError> {
    let param = |tape: &mut Tape, m: &DenseMatrix, learn: bool| {
        if learn {
            tape.leaf(m.clone())
        } else {
            tape.constant(m.clone())
        }
    };
    let raw = tape.constant(batch.features.clone());
    let (inputs, adapter) = match &head.adapter {
        Some(a) => {
            let a = param(tape, a, trainable && head.adapter_trainable);
            (tape.matmul(raw, a)?, Some(a))
        }
        None => (raw, None),
    };
    let in_dim = tape.value(inputs).cols();
    if in_dim != backbone.input_dim() {
        return Err(DownstreamError::Dimension(format!(
            "features have width {in_dim} after the adapter, backbone expects {}",
            backbone.input_dim()
        )));
    }
    let (mut prompt_vector, mut basis_p, mut basis_b) = (None, None, None);
    let prompted = match prompt {
        Prompt::None => inputs,
        Prompt::Vector(p) => {
            let pv = param(tape, &p.to_row(), trainable);
            prompt_vector = Some(pv);
            gpf_prompt(tape, inputs, pv)?
        }
        Prompt::Basis(basis) => {
            let p = param(tape, &basis.p, trainable);
            let b = param(tape, &basis.b, trainable);
            basis_p = Some(p);
            basis_b = Some(b);
            gpfplus_prompt(tape, inputs, p, b)?
        }
    };
    let mut h = backbone.forward(tape, &batch.adjacency, prompted)?.embeddings;
    if let Some(segments) = &batch.segments {
        h = FrozenBackbone::readout(tape, h, segments, batch.num_items)?;
    }
    let classifier = param(tape, &head.classifier, trainable);
    let logits = tape.matmul(h, classifier)?;
    Ok(ModelNodes {
        logits,
        inputs,
        prompt_vector,
        basis_p,
        basis_b,
        classifier,
        adapter,
    })
}

/// Logits for every item in `batch`.
pub fn predict(
    backbone: &FrozenBackbone,
    head: &HeadParams,
    batch: &GraphBatch,
    prompt: &Prompt,
) -> Result<DenseMatrix, DownstreamError> {
    let mut tape = Tape::new();
    let nodes = build_logits(&mut tape, backbone, batch, head, prompt, false)?;
    Ok(tape.value(nodes.logits).clone())
}

/// Fraction of `ids` whose argmax logit equals the label. Ties go to the lowest class.
pub fn evaluate(logits: &DenseMatrix, labels: &[Option<usize>], ids: &[usize]) -> Result<f64, DownstreamError> {
    if ids.is_empty() {
        return Err(DownstreamError::EmptyIds);
    }
    let predicted = logits.row_argmax();
    let mut correct = 0usize;
    for &id in ids {
        if id >= logits.rows() || id >= labels.len() {
            return Err(DownstreamError::IdOutOfRange {
                id,
                len: logits.rows().min(labels.len()),
            });
        }
        let label = labels[id].ok_or(DownstreamError::Unlabeled(id))?;
        if predicted[id] == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ids.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean: f64,
    /// Sample standard deviation (`n - 1`); zero for a single run.
    pub std: f64,
    pub runs: usize,
}

impl RunSummary {
    /// `"mean ± std"` in percent with two decimals.
    pub fn percent_cell(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean * 100.0, self.std * 100.0)
    }
}

pub fn aggregate_runs(values: &[f64]) -> Result<RunSummary, DownstreamError> {
    if values.is_empty() {
        return Err(DownstreamError::EmptyIds);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(RunSummary {
        mean,
        std,
        runs: values.len(),
    })
}
