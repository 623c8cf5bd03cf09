//! Sparse feature prompting for frozen graph neural networks.
//!
//! A pre-trained GCN is kept frozen while a learnable prompt is added to the
//! input node features. Four prompt schemes are provided:
//!
//! - `gpf`: one shared prompt vector added to every node.
//! - `gpfplus`: per-node prompts mixed from `k` basis vectors by attention.
//! - `gsfp`: `gpf` with an ℓ1 penalty, trained by proximal gradient steps so
//!   that only a few feature dimensions are prompted.
//! - `gsmfp`: `gpfplus` with an ℓ2,1 penalty on the basis, zeroing whole
//!   feature rows of the basis.

pub mod backbone;
pub mod downstream;
pub mod graph;
pub mod optim;
pub mod pretrain;
pub mod prompt;
pub mod tensor;

pub use backbone::FrozenBackbone;
pub use graph::{Dataset, FewShotSplit, Graph, TaskKind};
pub use tensor::{DenseMatrix, SparseMatrix, Tape, TensorError, Var};
