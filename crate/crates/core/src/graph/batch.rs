use std::sync::Arc;

use super::{normalize_adjacency, Dataset, Graph, GraphError, TaskKind};
use crate::tensor::{DenseMatrix, SparseMatrix};

/// Model input for one dataset: normalized adjacency over all nodes, stacked
/// features, and for graph tasks the graph id of every node.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub adjacency: Arc<SparseMatrix>,
    pub features: DenseMatrix,
    pub segments: Option<Arc<[usize]>>,
    pub num_items: usize,
}

impl GraphBatch {
    pub fn from_dataset(dataset: &Dataset) -> Result<Self, GraphError> {
        match dataset.task() {
            TaskKind::Node => Self::node_level(&dataset.graphs()[0]),
            TaskKind::Graph => Self::graph_level(dataset.graphs()),
        }
    }

    pub fn node_level(graph: &Graph) -> Result<Self, GraphError> {
        Ok(Self {
            adjacency: Arc::new(normalize_adjacency(graph.adjacency())?),
            features: graph.features().clone(),
            segments: None,
            num_items: graph.num_nodes(),
        })
    }

    /// Block-diagonal batch; normalizing the union equals normalizing each block.
    pub fn graph_level(graphs: &[Graph]) -> Result<Self, GraphError> {
        let union = Graph::disjoint_union(graphs)?;
        let segments: Vec<usize> = graphs
            .iter()
            .enumerate()
            .flat_map(|(i, g)| std::iter::repeat_n(i, g.num_nodes()))
            .collect();
        Ok(Self {
            adjacency: Arc::new(normalize_adjacency(union.adjacency())?),
            features: union.features().clone(),
            segments: Some(Arc::from(segments)),
            num_items: graphs.len(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }
}
