//! Feature prompts: a shared vector (`X + 1pᵀ`) or an attention-weighted
//! basis (`X + S Pᵀ` with `S = softmax(X B)` row-wise).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::uniform_matrix;
use crate::tensor::{row_softmax, DenseMatrix, Tape, TensorError, Var};

/// One prompt value per feature dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptVector(Vec<f64>);

impl PromptVector {
    pub fn new(values: Vec<f64>) -> Result<Self, TensorError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "prompt" });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// As a `1 × d` row.
    pub fn to_row(&self) -> DenseMatrix {
        DenseMatrix::row_vector(self.0.clone()).expect("finite prompt")
    }

    pub fn from_row(row: &DenseMatrix) -> Result<Self, TensorError> {
        if row.rows() != 1 {
            return Err(TensorError::Shape {
                op: "prompt_from_row",
                left: row.shape(),
                right: (1, row.cols()),
            });
        }
        Self::new(row.values().to_vec())
    }
}

/// `k` prompt basis vectors (columns of `p`, `d × k`) and their attention
/// projections (columns of `b`, `d × k`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBasis {
    pub p: DenseMatrix,
    pub b: DenseMatrix,
}

impl PromptBasis {
    pub fn new(p: DenseMatrix, b: DenseMatrix) -> Result<Self, TensorError> {
        if p.shape() != b.shape() || p.cols() == 0 {
            return Err(TensorError::Shape {
                op: "prompt_basis",
                left: p.shape(),
                right: b.shape(),
            });
        }
        Ok(Self { p, b })
    }

    /// `P` uniform in `[-0.01, 0.01]`, `B` uniform in `[-1/√d, 1/√d]`.
    pub fn init<R: Rng>(dim: usize, k: usize, rng: &mut R) -> Self {
        let p = uniform_matrix(dim, k, 1e-2, rng);
        let b = uniform_matrix(dim, k, 1.0 / (dim as f64).sqrt(), rng);
        Self { p, b }
    }

    pub fn dim(&self) -> usize {
        self.p.rows()
    }

    pub fn k(&self) -> usize {
        self.p.cols()
    }
}

/// `X + 1 pᵀ`, with `p` a `1 × d` node.
pub fn gpf_prompt(tape: &mut Tape, x: Var, p: Var) -> Result<Var, TensorError> {
    tape.add_row_broadcast(x, p)
}

/// `softmax(X B)` row-wise: entry `(i, j)` weighs basis vector `j` for node `i`.
pub fn attention_scores(tape: &mut Tape, x: Var, b: Var) -> Result<Var, TensorError> {
    let logits = tape.matmul(x, b)?;
    tape.row_softmax(logits)
}

/// `X + S Pᵀ`.
pub fn gpfplus_prompt(tape: &mut Tape, x: Var, p: Var, b: Var) -> Result<Var, TensorError> {
    let s = attention_scores(tape, x, b)?;
    let pt = tape.transpose(p)?;
    let prompts = tape.matmul(s, pt)?;
    tape.add(x, prompts)
}

pub fn apply_gpf(x: &DenseMatrix, p: &PromptVector) -> Result<DenseMatrix, TensorError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = tape.constant(p.to_row());
    let out = gpf_prompt(&mut tape, xv, pv)?;
    Ok(tape.value(out).clone())
}

pub fn scores(x: &DenseMatrix, basis: &PromptBasis) -> Result<DenseMatrix, TensorError> {
    Ok(row_softmax(&x.matmul(&basis.b)?))
}

pub fn apply_gpfplus(x: &DenseMatrix, basis: &PromptBasis) -> Result<DenseMatrix, TensorError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = tape.constant(basis.p.clone());
    let b = tape.constant(basis.b.clone());
    let out = gpfplus_prompt(&mut tape, xv, p, b)?;
    Ok(tape.value(out).clone())
}

/// Zero counts of a learned prompt. An entry counts as zero when `|v| <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SparsityReport {
    pub nnz: usize,
    /// Feature dimensions the prompt never touches.
    pub zero_dims: usize,
    pub dims: usize,
    /// Zero rows of `P` (basis prompts only).
    pub zero_rows: Option<usize>,
    /// Zero columns of `S Pᵀ` (basis prompts only).
    pub zero_columns: Option<usize>,
    pub threshold: f64,
}

impl SparsityReport {
    pub fn zero_fraction(&self) -> f64 {
        if self.dims == 0 {
            0.0
        } else {
            self.zero_dims as f64 / self.dims as f64
        }
    }
}

pub fn vector_sparsity(p: &PromptVector, threshold: f64) -> SparsityReport {
    let zero = |v: &f64| v.abs() <= threshold;
    let zeros = p.values().iter().filter(|v| zero(v)).count();
    SparsityReport {
        nnz: p.dim() - zeros,
        zero_dims: zeros,
        dims: p.dim(),
        zero_rows: None,
        zero_columns: None,
        threshold,
    }
}

/// Sparsity of a basis prompt; `scores` is the `n × k` attention matrix used
/// to form `S Pᵀ`.
pub fn basis_sparsity(
    basis: &PromptBasis,
    scores: &DenseMatrix,
    threshold: f64,
) -> Result<SparsityReport, TensorError> {
    let zero = |v: &f64| v.abs() <= threshold;
    let p = &basis.p;
    let nnz = p.values().iter().filter(|v| !zero(v)).count();
    let zero_rows = (0..p.rows()).filter(|&i| p.row(i).iter().all(zero)).count();
    let prompts = scores.matmul_nt(p)?;
    let zero_columns = (0..prompts.cols())
        .filter(|&j| (0..prompts.rows()).all(|i| zero(&prompts.get(i, j))))
        .count();
    Ok(SparsityReport {
        nnz,
        zero_dims: zero_rows,
        dims: p.rows(),
        zero_rows: Some(zero_rows),
        zero_columns: Some(zero_columns),
        threshold,
    })
}
