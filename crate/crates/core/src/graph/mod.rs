//! Graphs, datasets, adjacency normalization and few-shot splits.

mod batch;
mod io;
mod sbm;
mod split;

use serde::{Deserialize, Serialize};

use crate::tensor::{DenseMatrix, SparseMatrix, TensorError};

pub use batch::GraphBatch;
pub use io::{
    dataset_from_json, dataset_to_json, import_features_csv, load_dataset, save_dataset,
    LoadOptions,
};
pub use sbm::{synthesize_sbm, SbmConfig};
pub use split::{kshot_split, kshot_split_with, FewShotSplit, SplitMode};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{}invariant violated ({invariant}): {detail}", graph.map(|g| format!("graph {g}: ")).unwrap_or_default())]
    Invalid {
        graph: Option<usize>,
        invariant: &'static str,
        detail: String,
    },
    #[error("class {0} has no labeled items")]
    EmptyClass(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl GraphError {
    pub(crate) fn invalid(graph: Option<usize>, invariant: &'static str, detail: impl Into<String>) -> Self {
        Self::Invalid {
            graph,
            invariant,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Node,
    Graph,
}

/// An undirected graph with node features.
///
/// The adjacency is binary, symmetric and has an empty diagonal; self-loops
/// are only introduced by [`normalize_adjacency`].
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    adjacency: SparseMatrix,
    features: DenseMatrix,
    node_labels: Option<Vec<Option<usize>>>,
    graph_label: Option<usize>,
}

impl Graph {
    /// Builds a graph from an undirected edge list. Each edge may be listed in
    /// either or both directions; duplicates collapse.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: DenseMatrix,
        node_labels: Option<Vec<Option<usize>>>,
        graph_label: Option<usize>,
    ) -> Result<Self, GraphError> {
        let mut triplets = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(GraphError::invalid(
                    None,
                    "edge endpoints < numNodes",
                    format!("edge ({u}, {v}) in a {num_nodes}-node graph"),
                ));
            }
            if u == v {
                return Err(GraphError::invalid(
                    None,
                    "no self-loops",
                    format!("edge ({u}, {v})"),
                ));
            }
            triplets.push((u, v, 1.0));
            triplets.push((v, u, 1.0));
        }
        let mut adjacency = SparseMatrix::from_triplets(num_nodes, num_nodes, &triplets)?;
        if adjacency.values().iter().any(|&v| v != 1.0) {
            // duplicates were summed; flatten back to a binary matrix
            let ones = vec![1.0; adjacency.nnz()];
            adjacency = SparseMatrix::new(
                num_nodes,
                num_nodes,
                adjacency.offsets().to_vec(),
                adjacency.indices().to_vec(),
                ones,
            )?;
        }
        Self::new(adjacency, features, node_labels, graph_label)
    }

    pub fn new(
        adjacency: SparseMatrix,
        features: DenseMatrix,
        node_labels: Option<Vec<Option<usize>>>,
        graph_label: Option<usize>,
    ) -> Result<Self, GraphError> {
        let n = adjacency.rows();
        if adjacency.cols() != n {
            return Err(GraphError::invalid(
                None,
                "adjacency is square",
                format!("{:?}", adjacency.shape()),
            ));
        }
        if features.rows() != n {
            return Err(GraphError::invalid(
                None,
                "features.rows == numNodes",
                format!("{} feature rows for {n} nodes", features.rows()),
            ));
        }
        if (0..n).any(|i| adjacency.get(i, i) != 0.0) {
            return Err(GraphError::invalid(None, "no self-loops", "diagonal entry stored"));
        }
        if adjacency.values().iter().any(|&v| v != 1.0) || !adjacency.is_symmetric(0.0) {
            return Err(GraphError::invalid(
                None,
                "adjacency binary and symmetric",
                "non-binary or asymmetric entry",
            ));
        }
        if let Some(labels) = &node_labels {
            if labels.len() != n {
                return Err(GraphError::invalid(
                    None,
                    "nodeLabels.length == numNodes",
                    format!("{} labels for {n} nodes", labels.len()),
                ));
            }
        }
        Ok(Self {
            adjacency,
            features,
            node_labels,
            graph_label,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn node_labels(&self) -> Option<&[Option<usize>]> {
        self.node_labels.as_deref()
    }

    pub fn graph_label(&self) -> Option<usize> {
        self.graph_label
    }

    /// Undirected edges as `(u, v)` with `u < v`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.adjacency.nnz() / 2);
        for u in 0..self.num_nodes() {
            let (idx, _) = self.adjacency.row(u);
            out.extend(idx.iter().filter(|&&v| v > u).map(|&v| (u, v)));
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    pub fn degree(&self, u: usize) -> usize {
        self.adjacency.row(u).0.len()
    }

    /// Block-diagonal union of several graphs. Labels are dropped.
    pub fn disjoint_union(graphs: &[Graph]) -> Result<Graph, GraphError> {
        let dim = graphs.first().map_or(0, Graph::feature_dim);
        let total: usize = graphs.iter().map(Graph::num_nodes).sum();
        let mut edges = Vec::new();
        let mut features = Vec::with_capacity(total * dim);
        let mut offset = 0;
        for (i, g) in graphs.iter().enumerate() {
            if g.feature_dim() != dim {
                return Err(GraphError::invalid(
                    Some(i),
                    "consistent feature dimension",
                    format!("{} vs {dim}", g.feature_dim()),
                ));
            }
            edges.extend(g.edges().into_iter().map(|(u, v)| (u + offset, v + offset)));
            features.extend_from_slice(g.features.values());
            offset += g.num_nodes();
        }
        let features = DenseMatrix::new(total, dim, features)?;
        Graph::from_edges(total, &edges, features, None, None)
    }
}

/// Degree one-hot features, degrees above `max_degree` clamped to the last column.
pub fn degree_features(adjacency: &SparseMatrix, max_degree: usize) -> DenseMatrix {
    let n = adjacency.rows();
    let mut m = DenseMatrix::zeros(n, max_degree + 1);
    for u in 0..n {
        let d = adjacency.row(u).0.len().min(max_degree);
        m.set(u, d, 1.0);
    }
    m
}

/// `D^{-1/2} (A + I) D^{-1/2}` where `D` is the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &SparseMatrix) -> Result<SparseMatrix, GraphError> {
    let n = a.rows();
    if a.cols() != n {
        return Err(GraphError::invalid(
            None,
            "adjacency is square",
            format!("{:?}", a.shape()),
        ));
    }
    let mut triplets = Vec::with_capacity(a.nnz() + n);
    for r in 0..n {
        let (idx, vals) = a.row(r);
        triplets.extend(idx.iter().zip(vals).map(|(&c, &v)| (r, c, v)));
        triplets.push((r, r, 1.0));
    }
    let with_loops = SparseMatrix::from_triplets(n, n, &triplets)?;
    let degree: Vec<f64> = (0..n).map(|r| with_loops.row(r).1.iter().sum()).collect();
    let mut values = Vec::with_capacity(with_loops.nnz());
    for r in 0..n {
        let (idx, vals) = with_loops.row(r);
        values.extend(
            idx.iter()
                .zip(vals)
                .map(|(&c, &v)| v / (degree[r] * degree[c]).sqrt()),
        );
    }
    Ok(SparseMatrix::new(
        n,
        n,
        with_loops.offsets().to_vec(),
        with_loops.indices().to_vec(),
        values,
    )?)
}

/// A validated collection of graphs for one classification task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    task: TaskKind,
    classes: usize,
    graphs: Vec<Graph>,
}

impl Dataset {
    pub fn new(task: TaskKind, classes: usize, graphs: Vec<Graph>) -> Result<Self, GraphError> {
        if classes == 0 {
            return Err(GraphError::invalid(None, "classes >= 1", "classes = 0"));
        }
        match task {
            TaskKind::Node if graphs.len() != 1 => {
                return Err(GraphError::invalid(
                    None,
                    "node task has exactly one graph",
                    format!("{} graphs", graphs.len()),
                ))
            }
            TaskKind::Graph if graphs.is_empty() => {
                return Err(GraphError::invalid(
                    None,
                    "graph task has at least one graph",
                    "no graphs",
                ))
            }
            _ => {}
        }
        let dim = graphs[0].feature_dim();
        for (i, g) in graphs.iter().enumerate() {
            if g.feature_dim() != dim {
                return Err(GraphError::invalid(
                    Some(i),
                    "consistent feature dimension",
                    format!("{} vs {dim}", g.feature_dim()),
                ));
            }
            match task {
                TaskKind::Node => {
                    let labels = g.node_labels().ok_or_else(|| {
                        GraphError::invalid(Some(i), "node task carries nodeLabels", "missing")
                    })?;
                    if let Some(bad) = labels.iter().flatten().find(|&&l| l >= classes) {
                        return Err(GraphError::invalid(
                            Some(i),
                            "labels in [0, classes)",
                            format!("node label {bad} with {classes} classes"),
                        ));
                    }
                }
                TaskKind::Graph => {
                    if let Some(l) = g.graph_label().filter(|&l| l >= classes) {
                        return Err(GraphError::invalid(
                            Some(i),
                            "labels in [0, classes)",
                            format!("graph label {l} with {classes} classes"),
                        ));
                    }
                }
            }
        }
        Ok(Self {
            task,
            classes,
            graphs,
        })
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn feature_dim(&self) -> usize {
        self.graphs[0].feature_dim()
    }

    /// Number of classifiable items: nodes for a node task, graphs for a graph task.
    pub fn num_items(&self) -> usize {
        match self.task {
            TaskKind::Node => self.graphs[0].num_nodes(),
            TaskKind::Graph => self.graphs.len(),
        }
    }

    /// Label of every item, `None` when unlabeled.
    pub fn item_labels(&self) -> Vec<Option<usize>> {
        match self.task {
            TaskKind::Node => self.graphs[0]
                .node_labels()
                .map(<[_]>::to_vec)
                .unwrap_or_default(),
            TaskKind::Graph => self.graphs.iter().map(Graph::graph_label).collect(),
        }
    }
}
