use super::{DenseMatrix, TensorError};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        offsets: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, TensorError> {
        let invalid = |reason: &'static str| Err(TensorError::InvalidCsr(reason));
        if offsets.len() != rows + 1 || offsets[0] != 0 {
            return invalid("offsets must have rows + 1 entries starting at 0");
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) {
            return invalid("offsets must be nondecreasing");
        }
        if offsets[rows] != indices.len() || indices.len() != values.len() {
            return invalid("offsets, indices and values disagree on nonzero count");
        }
        for r in 0..rows {
            let idx = &indices[offsets[r]..offsets[r + 1]];
            if idx.iter().any(|&c| c >= cols) {
                return invalid("column index out of range");
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return invalid("column indices must strictly increase within a row");
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "sparse" });
        }
        Ok(Self {
            rows,
            cols,
            offsets,
            indices,
            values,
        })
    }

    /// Builds from `(row, col, value)` triplets in any order; duplicates are summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, TensorError> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        if sorted.iter().any(|&(r, c, _)| r >= rows || c >= cols) {
            return Err(TensorError::InvalidCsr("triplet index out of range"));
        }
        sorted.sort_by_key(|e| (e.0, e.1));
        let mut offsets = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            offsets[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            offsets[r + 1] += offsets[r];
        }
        Self::new(rows, cols, offsets, indices, values)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            offsets: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            offsets: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values stored in row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.offsets[r]..self.offsets[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        idx.binary_search(&c).map_or(0.0, |k| vals[k])
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                m.set(r, c, v);
            }
        }
        m
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                triplets.push((c, r, v));
            }
        }
        Self::from_triplets(self.cols, self.rows, &triplets).expect("transpose of valid CSR")
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        (0..self.rows).all(|r| {
            let (idx, vals) = self.row(r);
            idx.iter()
                .zip(vals)
                .all(|(&c, &v)| (self.get(c, r) - v).abs() <= tol)
        })
    }

    /// `self · d`.
    pub fn spmm(&self, d: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
        if self.cols != d.rows() {
            return Err(TensorError::shape("spmm", self.shape(), d.shape()));
        }
        let width = d.cols();
        let mut out = DenseMatrix::zeros(self.rows, width);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            let out_row = out.row_mut(r);
            for (&c, &v) in idx.iter().zip(vals) {
                for (o, &x) in out_row.iter_mut().zip(d.row(c)) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · g` without materializing the transpose.
    pub fn spmm_transposed(&self, g: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
        if self.rows != g.rows() {
            return Err(TensorError::shape("spmm_transposed", self.shape(), g.shape()));
        }
        let width = g.cols();
        let mut out = DenseMatrix::zeros(self.cols, width);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                for (o, &x) in out.row_mut(c).iter_mut().zip(g.row(r)) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_spmm_is_noop() {
        let m = DenseMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 - 1.5);
        assert_eq!(SparseMatrix::identity(3).spmm(&m).unwrap(), m);
    }

    #[test]
    fn empty_spmm_is_zero() {
        let m = DenseMatrix::from_fn(4, 3, |i, j| (i + j) as f64);
        let s = SparseMatrix::empty(2, 4);
        assert_eq!(s.spmm(&m).unwrap(), DenseMatrix::zeros(2, 3));
    }

    #[test]
    fn triplets_merge_duplicates() {
        let s = SparseMatrix::from_triplets(2, 2, &[(1, 0, 1.0), (0, 1, 2.0), (1, 0, 0.5)]).unwrap();
        assert_eq!(s.nnz(), 2);
        assert_eq!(s.get(1, 0), 1.5);
        assert_eq!(s.get(0, 0), 0.0);
    }

    #[test]
    fn rejects_malformed_csr() {
        assert!(SparseMatrix::new(2, 2, vec![0, 2, 1], vec![0, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseMatrix::new(1, 2, vec![0, 2], vec![1, 0], vec![1.0, 1.0]).is_err());
        assert!(SparseMatrix::new(1, 2, vec![0, 1], vec![2], vec![1.0]).is_err());
        assert!(SparseMatrix::new(1, 2, vec![0, 1], vec![0], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn transposed_product_matches_dense() {
        let s = SparseMatrix::from_triplets(3, 2, &[(0, 1, 2.0), (2, 0, -1.0), (1, 1, 0.5)]).unwrap();
        let g = DenseMatrix::from_fn(3, 2, |i, j| (i as f64) - (j as f64) * 0.5);
        let expected = s.to_dense().matmul_tn(&g).unwrap();
        assert_eq!(s.spmm_transposed(&g).unwrap(), expected);
    }
}
