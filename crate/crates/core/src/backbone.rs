//! Frozen multi-layer GCN encoder and its weights file.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{DenseMatrix, SparseMatrix, Tape, TensorError, Var};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("weights parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported weights format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("invalid backbone: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub weight: DenseMatrix,
    pub activation: Activation,
}

/// A pre-trained GCN, `H_l = act(Â · H_{l-1} · W_l)` with `H_0` the input
/// features. Every layer but the last uses ReLU. No biases.
///
/// Tuning code registers the weights as tape constants, so no gradient can
/// ever be requested for them.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    layers: Vec<GcnLayer>,
    hidden_dim: usize,
    adapter: Option<DenseMatrix>,
}

/// Output of [`FrozenBackbone::forward`]: the embedding node and the constant
/// nodes holding each layer weight.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    pub embeddings: Var,
    pub weights: Vec<Var>,
}

impl FrozenBackbone {
    /// Standard layout: ReLU after every layer except the last.
    pub fn new(weights: Vec<DenseMatrix>, adapter: Option<DenseMatrix>) -> Result<Self, BackboneError> {
        let n = weights.len();
        let layers = weights
            .into_iter()
            .enumerate()
            .map(|(i, weight)| GcnLayer {
                weight,
                activation: if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Self::from_layers(layers, adapter)
    }

    pub fn from_layers(layers: Vec<GcnLayer>, adapter: Option<DenseMatrix>) -> Result<Self, BackboneError> {
        let first = layers
            .first()
            .ok_or_else(|| BackboneError::Invalid("at least one layer required".into()))?;
        let hidden_dim = first.weight.cols();
        let mut prev = first.weight.rows();
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.rows() != prev {
                return Err(BackboneError::Invalid(format!(
                    "layer {i} expects {} inputs but the previous layer emits {prev}",
                    layer.weight.rows()
                )));
            }
            if layer.weight.cols() != hidden_dim {
                return Err(BackboneError::Invalid(format!(
                    "layer {i} emits {} features, hidden dim is {hidden_dim}",
                    layer.weight.cols()
                )));
            }
            prev = layer.weight.cols();
        }
        let input_dim = first.weight.rows();
        if let Some(a) = &adapter {
            if a.cols() != input_dim {
                return Err(BackboneError::Invalid(format!(
                    "adapter emits {} features, backbone expects {input_dim}",
                    a.cols()
                )));
            }
        }
        Ok(Self {
            layers,
            hidden_dim,
            adapter,
        })
    }

    /// Weights drawn uniformly from `[-1/√d_in, 1/√d_in]`.
    pub fn init_uniform<R: Rng>(input_dim: usize, hidden_dim: usize, layers: usize, rng: &mut R) -> Self {
        let weights = (0..layers)
            .map(|i| {
                let d_in = if i == 0 { input_dim } else { hidden_dim };
                uniform_matrix(d_in, hidden_dim, 1.0 / (d_in as f64).sqrt(), rng)
            })
            .collect();
        Self::new(weights, None).expect("uniform init chains")
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Width of the node embeddings.
    pub fn output_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[GcnLayer] {
        &self.layers
    }

    /// Linear map from raw features to the backbone input width, learned at pre-training.
    pub fn adapter(&self) -> Option<&DenseMatrix> {
        self.adapter.as_ref()
    }

    pub fn with_adapter(mut self, adapter: Option<DenseMatrix>) -> Result<Self, BackboneError> {
        if let Some(a) = &adapter {
            if a.cols() != self.input_dim() {
                return Err(BackboneError::Invalid(format!(
                    "adapter emits {} features, backbone expects {}",
                    a.cols(),
                    self.input_dim()
                )));
            }
        }
        self.adapter = adapter;
        Ok(self)
    }

    /// Runs the encoder on `x`. Gradients reach `x` but never the weights.
    pub fn forward(
        &self,
        tape: &mut Tape,
        adjacency: &Arc<SparseMatrix>,
        x: Var,
    ) -> Result<BackboneTrace, BackboneError> {
        let weights: Vec<Var> = self
            .layers
            .iter()
            .map(|l| tape.constant(l.weight.clone()))
            .collect();
        let embeddings = self.forward_with(tape, &weights, adjacency, x)?;
        Ok(BackboneTrace {
            embeddings,
            weights,
        })
    }

    /// Same layer stack as [`forward`](Self::forward) but with caller-owned weight nodes.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        weights: &[Var],
        adjacency: &Arc<SparseMatrix>,
        x: Var,
    ) -> Result<Var, BackboneError> {
        let xm = tape.value(x);
        if xm.cols() != self.input_dim() || xm.rows() != adjacency.rows() {
            return Err(TensorError::Shape {
                op: "backbone",
                left: xm.shape(),
                right: (adjacency.rows(), self.input_dim()),
            }
            .into());
        }
        let mut h = x;
        for (layer, &w) in self.layers.iter().zip(weights) {
            let hw = tape.matmul(h, w)?;
            h = tape.spmm(adjacency, hw)?;
            if layer.activation == Activation::Relu {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Plain forward pass for inference.
    pub fn embed(&self, adjacency: &Arc<SparseMatrix>, x: &DenseMatrix) -> Result<DenseMatrix, BackboneError> {
        let mut tape = Tape::new();
        let x = tape.constant(x.clone());
        let trace = self.forward(&mut tape, adjacency, x)?;
        Ok(tape.value(trace.embeddings).clone())
    }

    /// Mean-pools node embeddings into one row per graph.
    pub fn readout(
        tape: &mut Tape,
        embeddings: Var,
        segments: &Arc<[usize]>,
        num_graphs: usize,
    ) -> Result<Var, BackboneError> {
        Ok(tape.mean_pool_segments(embeddings, segments, num_graphs)?)
    }

    pub fn to_json(&self) -> String {
        let file = WeightsFile {
            format_version: FORMAT_VERSION,
            input_dim: self.input_dim(),
            hidden_dim: self.hidden_dim,
            layers: self.layers.len(),
            weights: self
                .layers
                .iter()
                .map(|l| l.weight.values().to_vec())
                .collect(),
            adapter_input_dim: self.adapter.as_ref().map(DenseMatrix::rows),
            adapter: self.adapter.as_ref().map(|a| a.values().to_vec()),
        };
        serde_json::to_string(&file).expect("weights serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, BackboneError> {
        let file: WeightsFile = serde_json::from_str(text).map_err(|e| BackboneError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if file.format_version != FORMAT_VERSION {
            return Err(BackboneError::Version {
                found: file.format_version,
            });
        }
        if file.layers == 0 || file.layers != file.weights.len() {
            return Err(BackboneError::Invalid(format!(
                "metadata says {} layers but {} weight blocks are present",
                file.layers,
                file.weights.len()
            )));
        }
        let mut weights = Vec::with_capacity(file.layers);
        for (i, values) in file.weights.into_iter().enumerate() {
            let rows = if i == 0 { file.input_dim } else { file.hidden_dim };
            if values.len() != rows * file.hidden_dim {
                return Err(BackboneError::Invalid(format!(
                    "weight block {i} has {} values, expected {rows}x{}",
                    values.len(),
                    file.hidden_dim
                )));
            }
            weights.push(DenseMatrix::new(rows, file.hidden_dim, values)?);
        }
        let adapter = match (file.adapter_input_dim, file.adapter) {
            (Some(rows), Some(values)) => {
                if values.len() != rows * file.input_dim {
                    return Err(BackboneError::Invalid(format!(
                        "adapter has {} values, expected {rows}x{}",
                        values.len(),
                        file.input_dim
                    )));
                }
                Some(DenseMatrix::new(rows, file.input_dim, values)?)
            }
            (None, None) => None,
            _ => {
                return Err(BackboneError::Invalid(
                    "adapter and adapter_input_dim must appear together".into(),
                ))
            }
        };
        Self::new(weights, adapter)
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<(), BackboneError> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|source| BackboneError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_weights(path: impl AsRef<Path>) -> Result<Self, BackboneError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| BackboneError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

// serde_json writes the shortest decimal that parses back to the same f64,
// so a save/load cycle is bit-exact.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    format_version: u32,
    input_dim: usize,
    hidden_dim: usize,
    layers: usize,
    weights: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adapter_input_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adapter: Option<Vec<f64>>,
}

pub(crate) fn uniform_matrix<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        if bound == 0.0 {
            0.0
        } else {
            rng.random_range(-bound..=bound)
        }
    })
}
