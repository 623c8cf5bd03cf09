use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Graph, GraphError, TaskKind};
use crate::tensor::DenseMatrix;

/// Stochastic block model with Gaussian node features whose mean depends on the block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SbmConfig {
    /// Nodes per block; block `i` is class `i`.
    pub sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Leading dimensions that carry the class signal. The rest are pure noise.
    #[serde(default)]
    pub informative_dims: Option<usize>,
    /// Scale of the per-class mean vectors.
    #[serde(default = "one")]
    pub signal: f64,
    /// Standard deviation of per-node feature noise.
    #[serde(default = "one")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl SbmConfig {
    pub fn new(sizes: Vec<usize>, p_in: f64, p_out: f64, feature_dim: usize, seed: u64) -> Self {
        Self {
            sizes,
            p_in,
            p_out,
            feature_dim,
            informative_dims: None,
            signal: 1.0,
            noise: 1.0,
            seed,
        }
    }
}

/// Samples a node-classification dataset from `config`. Deterministic in the seed.
pub fn synthesize_sbm(config: &SbmConfig) -> Result<Dataset, GraphError> {
    for (name, p) in [("p_in", config.p_in), ("p_out", config.p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(GraphError::Config(format!("{name} = {p} is not a probability")));
        }
    }
    if config.sizes.is_empty() || config.sizes.contains(&0) {
        return Err(GraphError::Config("every block needs at least one node".into()));
    }
    let informative = config
        .informative_dims
        .unwrap_or(config.feature_dim)
        .min(config.feature_dim);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let blocks = config.sizes.len();
    let means: Vec<Vec<f64>> = (0..blocks)
        .map(|_| {
            (0..informative)
                .map(|_| config.signal * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let labels: Vec<usize> = config
        .sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
        .collect();
    let n = labels.len();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] {
                config.p_in
            } else {
                config.p_out
            };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let mut values = Vec::with_capacity(n * config.feature_dim);
    for &label in &labels {
        for j in 0..config.feature_dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            let mean = means[label].get(j).copied().unwrap_or(0.0);
            values.push(mean + config.noise * z);
        }
    }
    let features = DenseMatrix::new(n, config.feature_dim, values)?;
    let graph = Graph::from_edges(
        n,
        &edges,
        features,
        Some(labels.into_iter().map(Some).collect()),
        None,
    )?;
    Dataset::new(TaskKind::Node, blocks, vec![graph])
}
