//! Reverse-mode differentiation over a closed set of matrix ops.
//!
//! Every op appends one node to the [`Tape`] holding its forward value and
//! whatever it needs for the backward rule. Nodes only reference earlier
//! nodes, so the node list is already in topological order and the backward
//! pass is a single reverse sweep.

use std::sync::Arc;

use super::{DenseMatrix, SparseMatrix, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    SpMM(Arc<SparseMatrix>, Var),
    Relu(Var),
    RowSoftmax(Var),
    AddRowBroadcast(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    MeanPool {
        input: Var,
        segments: Arc<[usize]>,
        counts: Vec<usize>,
    },
    GatherRows {
        input: Var,
        ids: Arc<[usize]>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Arc<[usize]>,
        probs: DenseMatrix,
    },
    Sum(Var),
    EdgeBce {
        input: Var,
        pairs: Arc<[(usize, usize)]>,
        targets: Arc<[f64]>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: DenseMatrix,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input. Only leaves can be passed to [`Tape::backward`].
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        self.nodes.get(v.0).is_some_and(|n| matches!(n.op, Op::Leaf))
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> Result<f64, TensorError> {
        let m = self.node(v)?;
        if m.value.shape() != (1, 1) {
            return Err(TensorError::NotScalar(m.value.shape()));
        }
        Ok(m.value.values()[0])
    }

    fn node(&self, v: Var) -> Result<&Node, TensorError> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn val(&self, v: Var) -> Result<&DenseMatrix, TensorError> {
        Ok(&self.node(v)?.value)
    }

    fn push(&mut self, op: Op, value: DenseMatrix, name: &'static str) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self.inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::AddRowBroadcast(a, b) | Op::Add(a, b) => vec![a, b],
            Op::Transpose(x)
            | Op::SpMM(_, x)
            | Op::Relu(x)
            | Op::RowSoftmax(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::MeanPool { input: x, .. }
            | Op::GatherRows { input: x, .. }
            | Op::SoftmaxCrossEntropy { logits: x, .. }
            | Op::EdgeBce { input: x, .. } => vec![x],
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.val(a)?.matmul(self.val(b)?)?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.val(x)?.transpose();
        self.push(Op::Transpose(x), value, "transpose")
    }

    /// Sparse-dense product. The sparse operand is never differentiated.
    pub fn spmm(&mut self, s: &Arc<SparseMatrix>, d: Var) -> Result<Var, TensorError> {
        let value = s.spmm(self.val(d)?)?;
        self.push(Op::SpMM(Arc::clone(s), d), value, "spmm")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.val(x)?.map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), value, "relu")
    }

    /// Softmax of each row, stabilized by subtracting the row maximum.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = row_softmax(self.val(x)?);
        self.push(Op::RowSoftmax(x), value, "row_softmax")
    }

    /// Adds the `1 × cols` row `v` to every row of `x`.
    pub fn add_row_broadcast(&mut self, x: Var, v: Var) -> Result<Var, TensorError> {
        let xm = self.val(x)?;
        let vm = self.val(v)?;
        if vm.rows() != 1 || vm.cols() != xm.cols() {
            return Err(TensorError::shape("add_row_broadcast", xm.shape(), vm.shape()));
        }
        let mut value = xm.clone();
        for i in 0..value.rows() {
            for (o, &p) in value.row_mut(i).iter_mut().zip(vm.values()) {
                *o += p;
            }
        }
        self.push(Op::AddRowBroadcast(x, v), value, "add_row_broadcast")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.val(a)?.add(self.val(b)?)?;
        self.push(Op::Add(a, b), value, "add")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        if !c.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let value = self.val(x)?.scale(c);
        self.push(Op::Scale(x, c), value, "scale")
    }

    /// Sum of every entry, as a `1 × 1` node.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.val(x)?.sum();
        let value =
            DenseMatrix::new(1, 1, vec![s]).map_err(|_| TensorError::NonFinite { op: "sum" })?;
        self.push(Op::Sum(x), value, "sum")
    }

    /// Row `g` of the output is the mean of the input rows whose segment id is `g`.
    pub fn mean_pool_segments(
        &mut self,
        x: Var,
        segments: &Arc<[usize]>,
        num_segments: usize,
    ) -> Result<Var, TensorError> {
        let xm = self.val(x)?;
        if segments.len() != xm.rows() {
            return Err(TensorError::shape(
                "mean_pool_segments",
                xm.shape(),
                (segments.len(), 1),
            ));
        }
        let mut counts = vec![0usize; num_segments];
        for &s in segments.iter() {
            if s >= num_segments {
                return Err(TensorError::SegmentOutOfRange {
                    segment: s,
                    count: num_segments,
                });
            }
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(TensorError::EmptySegment(empty));
        }
        let mut value = DenseMatrix::zeros(num_segments, xm.cols());
        for (r, &s) in segments.iter().enumerate() {
            for (o, &v) in value.row_mut(s).iter_mut().zip(xm.row(r)) {
                *o += v;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            let c = c as f64;
            for o in value.row_mut(s) {
                *o /= c;
            }
        }
        let op = Op::MeanPool {
            input: x,
            segments: Arc::clone(segments),
            counts,
        };
        self.push(op, value, "mean_pool_segments")
    }

    /// Selects rows `ids` (repeats allowed) in order.
    pub fn gather_rows(&mut self, x: Var, ids: &Arc<[usize]>) -> Result<Var, TensorError> {
        let xm = self.val(x)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= xm.rows()) {
            return Err(TensorError::IndexOutOfRange {
                index: bad,
                len: xm.rows(),
            });
        }
        let mut values = Vec::with_capacity(ids.len() * xm.cols());
        for &i in ids.iter() {
            values.extend_from_slice(xm.row(i));
        }
        let value = DenseMatrix::new(ids.len(), xm.cols(), values)?;
        let op = Op::GatherRows {
            input: x,
            ids: Arc::clone(ids),
        };
        self.push(op, value, "gather_rows")
    }

    /// Mean over rows of `-log softmax(logits)[label]`, as a `1 × 1` node.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &Arc<[usize]>,
    ) -> Result<Var, TensorError> {
        let lm = self.val(logits)?;
        if labels.len() != lm.rows() || lm.rows() == 0 {
            return Err(TensorError::shape(
                "softmax_cross_entropy",
                lm.shape(),
                (labels.len(), 1),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lm.cols()) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: lm.cols(),
            });
        }
        let probs = row_softmax(lm);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = lm.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let value = DenseMatrix::new(1, 1, vec![total / labels.len() as f64])
            .map_err(|_| TensorError::NonFinite { op: "softmax_cross_entropy" })?;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: Arc::clone(labels),
            probs,
        };
        self.push(op, value, "softmax_cross_entropy")
    }

    /// Mean binary cross-entropy of `sigmoid(h_u · h_v)` against `targets`, over row pairs of `h`.
    pub fn edge_bce(
        &mut self,
        h: Var,
        pairs: &Arc<[(usize, usize)]>,
        targets: &Arc<[f64]>,
    ) -> Result<Var, TensorError> {
        let hm = self.val(h)?;
        if pairs.len() != targets.len() || pairs.is_empty() {
            return Err(TensorError::shape(
                "edge_bce",
                (pairs.len(), 2),
                (targets.len(), 1),
            ));
        }
        if let Some(&(u, v)) = pairs.iter().find(|&&(u, v)| u.max(v) >= hm.rows()) {
            return Err(TensorError::IndexOutOfRange {
                index: u.max(v),
                len: hm.rows(),
            });
        }
        let mut probs = Vec::with_capacity(pairs.len());
        let mut total = 0.0;
        for (&(u, v), &t) in pairs.iter().zip(targets.iter()) {
            let s = super::dense::dot(hm.row(u), hm.row(v));
            // softplus(s) - t * s, written to avoid overflow for large |s|
            let softplus = s.max(0.0) + (-s.abs()).exp().ln_1p();
            total += softplus - t * s;
            probs.push(sigmoid(s));
        }
        let value = DenseMatrix::new(1, 1, vec![total / pairs.len() as f64])
            .map_err(|_| TensorError::NonFinite { op: "edge_bce" })?;
        let op = Op::EdgeBce {
            input: h,
            pairs: Arc::clone(pairs),
            targets: Arc::clone(targets),
            probs,
        };
        self.push(op, value, "edge_bce")
    }

    /// Gradients of the scalar `loss` with respect to each of `leaves`, in order.
    ///
    /// A leaf that does not influence `loss` gets an all-zero gradient. Asking
    /// for the gradient of a constant or an intermediate node is an error.
    pub fn backward(&self, loss: Var, leaves: &[Var]) -> Result<Vec<DenseMatrix>, TensorError> {
        let loss_node = self.node(loss)?;
        if loss_node.value.shape() != (1, 1) {
            return Err(TensorError::NotScalar(loss_node.value.shape()));
        }
        for &l in leaves {
            if !self.is_leaf(l) {
                return Err(TensorError::NotALeaf(l.0));
            }
        }

        let mut grads: Vec<Option<DenseMatrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(DenseMatrix::filled(1, 1, 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_gradients(node, &g)?;
            for (input, contrib) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_scaled(&contrib, 1.0)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            // keep leaf gradients around for the caller
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        Ok(leaves
            .iter()
            .map(|l| {
                grads
                    .get(l.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| {
                        let (r, c) = self.nodes[l.0].value.shape();
                        DenseMatrix::zeros(r, c)
                    })
            })
            .collect())
    }

    fn local_gradients(
        &self,
        node: &Node,
        g: &DenseMatrix,
    ) -> Result<Vec<(Var, DenseMatrix)>, TensorError> {
        let v = |x: Var| &self.nodes[x.0].value;
        let wants = |x: Var| self.nodes[x.0].requires_grad;
        let out = match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if wants(*a) {
                    out.push((*a, g.matmul_nt(v(*b))?));
                }
                if wants(*b) {
                    out.push((*b, v(*a).matmul_tn(g)?));
                }
                out
            }
            Op::Transpose(x) => vec![(*x, g.transpose())],
            Op::SpMM(s, d) => vec![(*d, s.spmm_transposed(g)?)],
            Op::Relu(x) => {
                let gx = v(*x).zip_with("relu_backward", g, |xv, gv| if xv > 0.0 { gv } else { 0.0 })?;
                vec![(*x, gx)]
            }
            Op::RowSoftmax(x) => {
                let y = &node.value;
                let mut gx = DenseMatrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let inner = super::dense::dot(yr, gr);
                    for ((o, &yv), &gv) in gx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                vec![(*x, gx)]
            }
            Op::AddRowBroadcast(x, p) => {
                let mut out = Vec::with_capacity(2);
                if wants(*x) {
                    out.push((*x, g.clone()));
                }
                if wants(*p) {
                    out.push((*p, g.column_sums()));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale(x, c) => vec![(*x, g.scale(*c))],
            Op::Sum(x) => {
                let (r, c) = v(*x).shape();
                vec![(*x, DenseMatrix::filled(r, c, g.values()[0]))]
            }
            Op::MeanPool {
                input,
                segments,
                counts,
            } => {
                let (r, c) = v(*input).shape();
                let mut gx = DenseMatrix::zeros(r, c);
                for (row, &s) in segments.iter().enumerate() {
                    let n = counts[s] as f64;
                    for (o, &gv) in gx.row_mut(row).iter_mut().zip(g.row(s)) {
                        *o = gv / n;
                    }
                }
                vec![(*input, gx)]
            }
            Op::GatherRows { input, ids } => {
                let (r, c) = v(*input).shape();
                let mut gx = DenseMatrix::zeros(r, c);
                for (k, &i) in ids.iter().enumerate() {
                    for (o, &gv) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += gv;
                    }
                }
                vec![(*input, gx)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g.values()[0] / labels.len() as f64;
                let mut gx = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    let row = gx.row_mut(i);
                    row[label] -= 1.0;
                    for o in row.iter_mut() {
                        *o *= scale;
                    }
                }
                vec![(*logits, gx)]
            }
            Op::EdgeBce {
                input,
                pairs,
                targets,
                probs,
            } => {
                let h = v(*input);
                let scale = g.values()[0] / pairs.len() as f64;
                let mut gx = DenseMatrix::zeros(h.rows(), h.cols());
                for ((&(u, w), &t), &p) in pairs.iter().zip(targets.iter()).zip(probs) {
                    let ds = (p - t) * scale;
                    for (o, &hv) in gx.row_mut(u).iter_mut().zip(h.row(w)) {
                        *o += ds * hv;
                    }
                    for (o, &hv) in gx.row_mut(w).iter_mut().zip(h.row(u)) {
                        *o += ds * hv;
                    }
                }
                vec![(*input, gx)]
            }
        };
        Ok(out)
    }
}

pub(crate) fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn row_softmax(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[-1.0, 2.0]]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).values(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_degenerate_cases() {
        let mut t = Tape::new();
        let one_col = t.constant(m(&[&[3.0], &[-7.0]]));
        let s = t.row_softmax(one_col).unwrap();
        assert_eq!(t.value(s).values(), &[1.0, 1.0]);

        let flat = t.constant(m(&[&[0.0, 0.0, 0.0]]));
        let s = t.row_softmax(flat).unwrap();
        for &v in t.value(s).values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let p = t.leaf(m(&[&[1.0, -2.0, 0.5]]));
        let s = t.sum(p).unwrap();
        let g = t.backward(s, &[p]).unwrap();
        assert_eq!(g[0].values(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let p = t.leaf(m(&[&[1.0, 2.0]]));
        let q = t.leaf(m(&[&[3.0]]));
        let s = t.sum(p).unwrap();
        let g = t.backward(s, &[q]).unwrap();
        assert_eq!(g[0].values(), &[0.0]);
    }

    #[test]
    fn constants_and_intermediates_are_not_leaves() {
        let mut t = Tape::new();
        let c = t.constant(m(&[&[1.0]]));
        let p = t.leaf(m(&[&[2.0]]));
        let y = t.matmul(c, p).unwrap();
        let s = t.sum(y).unwrap();
        assert!(matches!(t.backward(s, &[c]), Err(TensorError::NotALeaf(_))));
        assert!(matches!(t.backward(s, &[y]), Err(TensorError::NotALeaf(_))));
        assert!(t.backward(y, &[p]).is_ok());
        let row = t.constant(m(&[&[1.0, 1.0]]));
        let wide = t.matmul(p, row).unwrap();
        assert!(matches!(t.backward(wide, &[p]), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn mean_pool_examples() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[2.0, 4.0], &[4.0, 8.0]]));
        let one: Arc<[usize]> = Arc::from(vec![0, 0]);
        let y = t.mean_pool_segments(x, &one, 1).unwrap();
        assert_eq!(t.value(y).values(), &[3.0, 6.0]);

        let own: Arc<[usize]> = Arc::from(vec![0, 1]);
        let y = t.mean_pool_segments(x, &own, 2).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let gap: Arc<[usize]> = Arc::from(vec![0, 2]);
        assert!(matches!(
            t.mean_pool_segments(x, &gap, 3),
            Err(TensorError::EmptySegment(1))
        ));
    }

    #[test]
    fn cross_entropy_uniform_and_margin() {
        let labels: Arc<[usize]> = Arc::from(vec![0, 2]);
        let mut t = Tape::new();
        let logits = t.constant(DenseMatrix::zeros(2, 4));
        let l = t.softmax_cross_entropy(logits, &labels).unwrap();
        assert!((t.scalar(l).unwrap() - 4f64.ln()).abs() < 1e-15);

        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 5.0, 20.0, 80.0] {
            let mut t = Tape::new();
            let mut z = DenseMatrix::zeros(2, 4);
            z.set(0, 0, margin);
            z.set(1, 2, margin);
            let logits = t.constant(z);
            let l = t.softmax_cross_entropy(logits, &labels).unwrap();
            let loss = t.scalar(l).unwrap();
            assert!(loss < prev || loss == 0.0);
            prev = loss;
        }
        assert!(prev < 1e-30);

        let bad: Arc<[usize]> = Arc::from(vec![0, 4]);
        let mut t = Tape::new();
        let logits = t.constant(DenseMatrix::zeros(2, 4));
        assert!(matches!(
            t.softmax_cross_entropy(logits, &bad),
            Err(TensorError::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn broadcast_checks_shape() {
        let mut t = Tape::new();
        let x = t.constant(DenseMatrix::zeros(3, 2));
        let v = t.leaf(DenseMatrix::zeros(1, 3));
        assert!(t.add_row_broadcast(x, v).is_err());
    }

    #[test]
    fn edge_bce_at_zero_embeddings_is_ln2() {
        let mut t = Tape::new();
        let h = t.leaf(DenseMatrix::zeros(3, 2));
        let pairs: Arc<[(usize, usize)]> = Arc::from(vec![(0, 1), (1, 2)]);
        let targets: Arc<[f64]> = Arc::from(vec![1.0, 0.0]);
        let l = t.edge_bce(h, &pairs, &targets).unwrap();
        assert!((t.scalar(l).unwrap() - 2f64.ln()).abs() < 1e-15);
    }
}
