use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{degree_features, Dataset, Graph, GraphError, TaskKind};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct LoadOptions {
    /// Width cap for synthesized degree one-hot features on featureless graphs.
    pub max_degree: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { max_degree: 32 }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    task: TaskKind,
    classes: usize,
    graphs: Vec<GraphFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct GraphFile {
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_labels: Option<Vec<Option<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    graph_label: Option<usize>,
}

pub fn load_dataset(path: impl AsRef<Path>, options: &LoadOptions) -> Result<Dataset, GraphError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse(&text, &path.display().to_string(), options)
}

pub fn dataset_from_json(text: &str, options: &LoadOptions) -> Result<Dataset, GraphError> {
    parse(text, "<memory>", options)
}

fn parse(text: &str, origin: &str, options: &LoadOptions) -> Result<Dataset, GraphError> {
    let file: DatasetFile = serde_json::from_str(text).map_err(|e| GraphError::Parse {
        path: origin.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let featureless = file.graphs.iter().filter(|g| g.features.is_none()).count();
    if featureless != 0 && featureless != file.graphs.len() {
        return Err(GraphError::invalid(
            None,
            "features present on all graphs or none",
            format!("{featureless} of {} graphs lack features", file.graphs.len()),
        ));
    }
    let mut graphs = Vec::with_capacity(file.graphs.len());
    for (i, g) in file.graphs.into_iter().enumerate() {
        graphs.push(build_graph(g, options).map_err(|e| tag_graph(e, i))?);
    }
    Dataset::new(file.task, file.classes, graphs)
}

fn build_graph(g: GraphFile, options: &LoadOptions) -> Result<Graph, GraphError> {
    let edges: Vec<(usize, usize)> = g.edges.iter().map(|e| (e[0], e[1])).collect();
    let placeholder = DenseMatrix::zeros(g.num_nodes, 0);
    let graph = Graph::from_edges(g.num_nodes, &edges, placeholder, g.node_labels, g.graph_label)?;
    let features = match g.features {
        Some(rows) => {
            if rows.len() != g.num_nodes {
                return Err(GraphError::invalid(
                    None,
                    "features.rows == numNodes",
                    format!("{} feature rows for {} nodes", rows.len(), g.num_nodes),
                ));
            }
            let dim = rows.first().map_or(0, Vec::len);
            DenseMatrix::from_rows(&rows).map_err(|_| {
                GraphError::invalid(None, "features rectangular", format!("expected {dim} columns"))
            })?
        }
        None => degree_features(graph.adjacency(), options.max_degree),
    };
    Graph::new(
        graph.adjacency().clone(),
        features,
        graph.node_labels().map(<[_]>::to_vec),
        graph.graph_label(),
    )
}

fn tag_graph(e: GraphError, index: usize) -> GraphError {
    match e {
        GraphError::Invalid {
            graph: None,
            invariant,
            detail,
        } => GraphError::Invalid {
            graph: Some(index),
            invariant,
            detail,
        },
        other => other,
    }
}

/// Serializes with a fixed field order and edges listed once as `u < v`.
pub fn dataset_to_json(dataset: &Dataset) -> String {
    let file = DatasetFile {
        task: dataset.task(),
        classes: dataset.classes(),
        graphs: dataset
            .graphs()
            .iter()
            .map(|g| GraphFile {
                num_nodes: g.num_nodes(),
                edges: g.edges().into_iter().map(|(u, v)| [u, v]).collect(),
                features: Some(
                    (0..g.num_nodes())
                        .map(|i| g.features().row(i).to_vec())
                        .collect(),
                ),
                node_labels: g.node_labels().map(<[_]>::to_vec),
                graph_label: g.graph_label(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("dataset serializes")
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), GraphError> {
    let path = path.as_ref();
    fs::write(path, dataset_to_json(dataset) + "\n").map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a node feature matrix from CSV: a header naming one column per
/// feature dimension, then one row per node.
pub fn import_features_csv(path: impl AsRef<Path>) -> Result<DenseMatrix, GraphError> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(&origin, e))?;
    let dim = reader.headers().map_err(|e| csv_error(&origin, e))?.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(&origin, e))?;
        // header is line 1
        let line = i + 2;
        if record.len() != dim {
            return Err(GraphError::Parse {
                path: origin,
                line,
                column: record.len(),
                message: format!("expected {dim} fields, found {}", record.len()),
            });
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| GraphError::Parse {
                path: origin.clone(),
                line,
                column: j + 1,
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(GraphError::Parse {
                    path: origin.clone(),
                    line,
                    column: j + 1,
                    message: "non-finite feature".into(),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    Ok(DenseMatrix::new(rows, dim, values)?)
}

fn csv_error(origin: &str, e: csv::Error) -> GraphError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    GraphError::Parse {
        path: origin.to_string(),
        line,
        column: 0,
        message: e.to_string(),
    }
}
