//! Edge-prediction pre-training for the GCN encoder.
//!
//! Pairs of nodes are scored by `sigmoid(h_u · h_v)` on the encoder output and
//! the weights are fit with binary cross-entropy: observed edges are
//! positives, uniformly sampled non-edges are negatives (fresh each epoch).

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{uniform_matrix, BackboneError, FrozenBackbone};
use crate::graph::{normalize_adjacency, Dataset, Graph, GraphError};
use crate::tensor::{sigmoid, dot, DenseMatrix, Tape, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error("graph has no edges to predict")]
    NoEdges,
    #[error("invalid pre-training config: {0}")]
    Config(String),
    #[error("loss became non-finite at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Negatives sampled per positive edge.
    pub negative_ratio: usize,
    pub seed: u64,
    pub layers: usize,
    pub hidden_dim: usize,
    /// Backbone input width. When it differs from the raw feature width a
    /// linear adapter is trained alongside the encoder.
    pub input_dim: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            negative_ratio: 1,
            seed: 0,
            layers: 3,
            hidden_dim: 64,
            input_dim: None,
        }
    }
}

impl PretrainConfig {
    fn validate(&self) -> Result<(), PretrainError> {
        let fail = |m: &str| Err(PretrainError::Config(m.into()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.negative_ratio == 0 {
            return fail("negative ratio must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight decay must be nonnegative");
        }
        if self.layers == 0 || self.hidden_dim == 0 {
            return fail("layers and hidden dim must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub backbone: FrozenBackbone,
    /// Loss at the start of each epoch, before that epoch's update.
    pub losses: Vec<f64>,
}

/// Pre-trains from a seeded uniform initialization.
pub fn pretrain(graph: &Graph, config: &PretrainConfig) -> Result<PretrainOutcome, PretrainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let raw_dim = graph.feature_dim();
    let input_dim = config.input_dim.unwrap_or(raw_dim);
    let backbone = FrozenBackbone::init_uniform(input_dim, config.hidden_dim, config.layers, &mut rng);
    let adapter = (input_dim != raw_dim)
        .then(|| uniform_matrix(raw_dim, input_dim, 1.0 / (raw_dim as f64).sqrt(), &mut rng));
    let backbone = backbone.with_adapter(adapter)?;
    train(graph, config, backbone, rng)
}

/// Pre-trains on the disjoint union of every graph in `dataset`.
pub fn pretrain_dataset(dataset: &Dataset, config: &PretrainConfig) -> Result<PretrainOutcome, PretrainError> {
    if dataset.graphs().len() == 1 {
        return pretrain(&dataset.graphs()[0], config);
    }
    pretrain(&Graph::disjoint_union(dataset.graphs())?, config)
}

/// Pre-trains starting from the given weights (and adapter, if any).
pub fn pretrain_from(
    graph: &Graph,
    config: &PretrainConfig,
    init: FrozenBackbone,
) -> Result<PretrainOutcome, PretrainError> {
    config.validate()?;
    let rng = ChaCha8Rng::seed_from_u64(config.seed);
    train(graph, config, init, rng)
}

fn train(
    graph: &Graph,
    config: &PretrainConfig,
    init: FrozenBackbone,
    mut rng: ChaCha8Rng,
) -> Result<PretrainOutcome, PretrainError> {
    let positives = graph.edges();
    if positives.is_empty() {
        return Err(PretrainError::NoEdges);
    }
    let expected_raw = init.adapter().map_or(init.input_dim(), DenseMatrix::rows);
    if graph.feature_dim() != expected_raw {
        return Err(PretrainError::Config(format!(
            "graph features have width {}, backbone expects {expected_raw}",
            graph.feature_dim()
        )));
    }
    let adjacency = Arc::new(normalize_adjacency(graph.adjacency())?);
    let mut weights: Vec<DenseMatrix> = init.layers().iter().map(|l| l.weight.clone()).collect();
    let mut adapter = init.adapter().cloned();
    let mut losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let negatives = sample_negatives(graph, positives.len() * config.negative_ratio, &mut rng);
        let mut pairs = positives.clone();
        pairs.extend_from_slice(&negatives);
        let mut targets = vec![1.0; positives.len()];
        targets.resize(pairs.len(), 0.0);
        let pairs: Arc<[(usize, usize)]> = Arc::from(pairs);
        let targets: Arc<[f64]> = Arc::from(targets);

        let mut tape = Tape::new();
        let mut leaves: Vec<_> = weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let raw = tape.constant(graph.features().clone());
        let x = match &adapter {
            Some(a) => {
                let a = tape.leaf(a.clone());
                leaves.push(a);
                tape.matmul(raw, a)?
            }
            None => raw,
        };
        let layer_vars = &leaves[..weights.len()];
        let h = init
            .forward_with(&mut tape, layer_vars, &adjacency, x)
            .map_err(|e| divergence_or(e, epoch))?;
        let loss = tape
            .edge_bce(h, &pairs, &targets)
            .map_err(|e| divergence_or(BackboneError::Tensor(e), epoch))?;
        losses.push(tape.scalar(loss)?);

        let grads = tape.backward(loss, &leaves)?;
        let params = weights.iter_mut().chain(adapter.iter_mut());
        for (param, grad) in params.zip(&grads) {
            let decay = param.scale(config.weight_decay);
            param.add_scaled(grad, -config.learning_rate)?;
            param.add_scaled(&decay, -config.learning_rate)?;
            if !param.is_finite() {
                return Err(PretrainError::Divergence { epoch });
            }
        }
    }

    let backbone = FrozenBackbone::from_layers(
        init.layers()
            .iter()
            .zip(weights)
            .map(|(l, weight)| crate::backbone::GcnLayer {
                weight,
                activation: l.activation,
            })
            .collect(),
        adapter,
    )?;
    Ok(PretrainOutcome { backbone, losses })
}

fn divergence_or(e: BackboneError, epoch: usize) -> PretrainError {
    match e {
        BackboneError::Tensor(TensorError::NonFinite { .. }) => PretrainError::Divergence { epoch },
        other => other.into(),
    }
}

/// Uniform non-edges `(u, v)` with `u != v`, sampled with replacement.
/// Returns fewer than `count` only when the graph is complete.
fn sample_negatives<R: Rng>(graph: &Graph, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let n = graph.num_nodes();
    let non_edges = n * n.saturating_sub(1) / 2 - graph.num_edges();
    if non_edges == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u != v && graph.adjacency().get(u, v) == 0.0 {
            out.push((u.min(v), u.max(v)));
        }
    }
    out
}

/// `sigmoid(h_u · h_v)` for each pair under `backbone`.
pub fn edge_scores(
    backbone: &FrozenBackbone,
    graph: &Graph,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>, PretrainError> {
    let adjacency = Arc::new(normalize_adjacency(graph.adjacency())?);
    let x = match backbone.adapter() {
        Some(a) => graph.features().matmul(a)?,
        None => graph.features().clone(),
    };
    let h = backbone.embed(&adjacency, &x)?;
    Ok(pairs
        .iter()
        .map(|&(u, v)| sigmoid(dot(h.row(u), h.row(v))))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{synthesize_sbm, SbmConfig};

    fn sbm_graph() -> Graph {
        let d = synthesize_sbm(&SbmConfig::new(vec![12, 12], 0.6, 0.02, 6, 3)).unwrap();
        d.graphs()[0].clone()
    }

    fn small_config() -> PretrainConfig {
        PretrainConfig {
            epochs: 30,
            learning_rate: 0.05,
            layers: 2,
            hidden_dim: 8,
            seed: 11,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn zero_weights_start_at_ln2() {
        let g = sbm_graph();
        let init = FrozenBackbone::new(vec![DenseMatrix::zeros(6, 8), DenseMatrix::zeros(8, 8)], None).unwrap();
        let out = pretrain_from(&g, &small_config(), init).unwrap();
        assert!((out.losses[0] - 2f64.ln()).abs() < 1e-12, "{}", out.losses[0]);
    }

    #[test]
    fn deterministic_in_seed() {
        let g = sbm_graph();
        let a = pretrain(&g, &small_config()).unwrap();
        let b = pretrain(&g, &small_config()).unwrap();
        assert_eq!(a.backbone.to_json(), b.backbone.to_json());
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn edgeless_graph_is_rejected() {
        let g = Graph::from_edges(3, &[], DenseMatrix::zeros(3, 2), None, None).unwrap();
        assert!(matches!(pretrain(&g, &PretrainConfig::default()), Err(PretrainError::NoEdges)));
    }

    #[test]
    fn adapter_is_trained_when_widths_differ() {
        let g = sbm_graph();
        let config = PretrainConfig {
            input_dim: Some(4),
            ..small_config()
        };
        let out = pretrain(&g, &config).unwrap();
        let adapter = out.backbone.adapter().expect("adapter present");
        assert_eq!(adapter.shape(), (6, 4));
        assert_eq!(out.backbone.input_dim(), 4);
    }

    #[test]
    fn bad_config_is_rejected() {
        let g = sbm_graph();
        for config in [
            PretrainConfig { epochs: 0, ..small_config() },
            PretrainConfig { negative_ratio: 0, ..small_config() },
        ] {
            assert!(matches!(pretrain(&g, &config), Err(PretrainError::Config(_))));
        }
    }
}
