//! Dense and CSR matrices plus a small reverse-mode tape.

mod dense;
mod sparse;
mod tape;

pub use dense::DenseMatrix;
pub use sparse::SparseMatrix;
pub use tape::{row_softmax, Tape, Var};

pub(crate) use dense::dot;
pub(crate) use tape::sigmoid;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{rows}x{cols} matrix cannot hold {len} values")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("ragged rows: expected {expected} columns, found {found}")]
    Ragged { expected: usize, found: usize },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid CSR structure: {0}")]
    InvalidCsr(&'static str),
    #[error("node {0} is not a gradient leaf")]
    NotALeaf(usize),
    #[error("node {0} is not on this tape")]
    UnknownVar(usize),
    #[error("expected a 1x1 loss, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("segment {0} has no rows")]
    EmptySegment(usize),
    #[error("segment id {segment} out of range for {count} segments")]
    SegmentOutOfRange { segment: usize, count: usize },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Self::Shape { op, left, right }
    }
}
