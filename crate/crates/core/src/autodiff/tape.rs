use std::sync::Arc;

use super::Matrix;
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sigmoid,
    /// `ln σ(x)`, evaluated without forming `σ(x)`.
    LogSigmoid,
    Tanh,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    ConstMatMul(Arc<Matrix>, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    InvSqrt(Var),
    Sum(Var),
    RowSums(Var),
    AddRowBroadcast(Var, Var),
    Gather(Var, Arc<[usize]>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SegmentSum(Var, Arc<[usize]>),
    SpMM {
        matrix: Arc<SparseMatrix>,
        weights: Option<Var>,
        x: Var,
    },
    L2RowNormalize(Var, f64),
    PairwiseSqDist(Var),
    DoubleCenter(Var),
    LogSoftmaxRows(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
    trainable: bool,
}

/// Append-only computation record for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so append order is a topological
/// order and the backward sweep walks it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`]. Only parameter gradients are retained.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Takes ownership of the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn double_center(m: &Matrix) -> Matrix {
    let (n, c) = m.shape();
    let mut row_means = vec![0.0; n];
    let mut col_means = vec![0.0; c];
    for (r, mean) in row_means.iter_mut().enumerate() {
        for (j, &v) in m.row(r).iter().enumerate() {
            *mean += v;
            col_means[j] += v;
        }
    }
    let grand: f64 = row_means.iter().sum::<f64>() / (n * c) as f64;
    row_means.iter_mut().for_each(|v| *v /= c as f64);
    col_means.iter_mut().for_each(|v| *v /= n as f64);
    let mut out = m.clone();
    for (r, mean) in row_means.iter().enumerate() {
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            *v += grand - mean - col_means[j];
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    pub fn is_parameter(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    pub fn parameters(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].trainable)
            .map(Var)
            .collect()
    }

    fn push(&mut self, op_name: &'static str, op: Op, value: Matrix) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::AddRowBroadcast(a, b) => {
                self.ng(*a) || self.ng(*b)
            }
            Op::Transpose(a)
            | Op::ConstMatMul(_, a)
            | Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::InvSqrt(a)
            | Op::Sum(a)
            | Op::RowSums(a)
            | Op::Gather(a, _)
            | Op::SliceRows(a, _)
            | Op::SegmentSum(a, _)
            | Op::L2RowNormalize(a, _)
            | Op::PairwiseSqDist(a)
            | Op::DoubleCenter(a)
            | Op::LogSoftmaxRows(a) => self.ng(*a),
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.iter().any(|v| self.ng(*v)),
            Op::SpMM { weights, x, .. } => self.ng(*x) || weights.is_some_and(|w| self.ng(w)),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            trainable: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A non-trainable input.
    pub fn constant(&mut self, m: Matrix) -> Result<Var> {
        self.push("constant", Op::Leaf, m)
    }

    /// A trainable input; its gradient is populated by [`Tape::backward`].
    pub fn parameter(&mut self, m: Matrix) -> Result<Var> {
        let v = self.push("parameter", Op::Leaf, m)?;
        let node = &mut self.nodes[v.0];
        node.trainable = true;
        node.needs_grad = true;
        Ok(v)
    }

    /// Copies the value of `v` into a new constant, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let m = self.value(v).clone();
        self.constant(m)
    }

    pub fn mat_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::dim("mat_mul", format!("{ar}x{ac} · {br}x{bc}")));
        }
        let value = self.value(a).matmul(self.value(b));
        self.push("mat_mul", Op::MatMul(a, b), value)
    }

    /// Shared constant matrix times a node, without copying the constant onto the tape.
    pub fn const_mat_mul(&mut self, a: &Arc<Matrix>, x: Var) -> Result<Var> {
        if a.cols() != self.shape(x).0 {
            return Err(Error::dim(
                "const_mat_mul",
                format!("{:?} · {:?}", a.shape(), self.shape(x)),
            ));
        }
        let value = a.matmul(self.value(x));
        self.push("const_mat_mul", Op::ConstMatMul(Arc::clone(a), x), value)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push("transpose", Op::Transpose(a), value)
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "elementwise",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (x, y) = (self.value(a), self.value(b));
        let value = match op {
            Binary::Add => x.zip_map(y, |p, q| p + q),
            Binary::Sub => x.zip_map(y, |p, q| p - q),
            Binary::Mul => x.zip_map(y, |p, q| p * q),
        };
        self.push("elementwise", Op::Binary(op, a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match op {
            Unary::Neg => x.map(|v| -v),
            Unary::Exp => x.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive operand {bad}"),
                    });
                }
                x.map(f64::ln)
            }
            Unary::Sigmoid => x.map(sigmoid),
            Unary::LogSigmoid => x.map(log_sigmoid),
            Unary::Tanh => x.map(f64::tanh),
            Unary::Abs => x.map(f64::abs),
        };
        self.push("elementwise", Op::Unary(op, a), value)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::LogSigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c);
        self.push("scale", Op::Scale(a, c), value)
    }

    /// `x^{-1/2}` entrywise; entries at or below `eps` map to 0.
    pub fn inv_sqrt(&mut self, a: Var, eps: f64) -> Result<Var> {
        let value = self
            .value(a)
            .map(|v| if v > eps { 1.0 / v.sqrt() } else { 0.0 });
        self.push("inv_sqrt", Op::InvSqrt(a), value)
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::scalar(self.value(a).sum());
        self.push("sum", Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).data().len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty matrix".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sums as an n×1 column.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let sums: Vec<f64> = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        self.push("row_sums", Op::RowSums(a), Matrix::column(&sums))
    }

    /// Row-wise inner products of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.row_sums(p)
    }

    /// Adds a 1×c row to every row of `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != self.shape(m).1 {
            return Err(Error::dim(
                "add_row",
                format!("row {rr}x{rc} vs matrix {:?}", self.shape(m)),
            ));
        }
        let mut value = self.value(m).clone();
        let r = self.value(row).row(0).to_vec();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        self.push("add_row", Op::AddRowBroadcast(m, row), value)
    }

    /// Output row `i` is input row `indices[i]`; duplicates accumulate in backward.
    pub fn row_gather(&mut self, m: Var, indices: &[usize]) -> Result<Var> {
        let rows = self.shape(m).0;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                op: "row_gather",
                index: bad,
                len: rows,
            });
        }
        let value = self.value(m).gather_rows(indices);
        self.push("row_gather", Op::Gather(m, indices.into()), value)
    }

    pub fn slice_rows(&mut self, m: Var, start: usize, len: usize) -> Result<Var> {
        let rows = self.shape(m).0;
        if start + len > rows {
            return Err(Error::Index {
                op: "slice_rows",
                index: start + len,
                len: rows,
            });
        }
        let x = self.value(m);
        let cols = x.cols();
        let value = Matrix::from_vec(
            len,
            cols,
            x.data()[start * cols..(start + len) * cols].to_vec(),
        )?;
        self.push("slice_rows", Op::SliceRows(m, start), value)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            if x.cols() != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("{} vs {cols} cols", x.cols()),
                ));
            }
            rows += x.rows();
            data.extend_from_slice(x.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        self.push("concat_rows", Op::ConcatRows(parts.to_vec()), value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                value.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push("concat_cols", Op::ConcatCols(parts.to_vec()), value)
    }

    /// Scatter-adds input row `e` into output row `segments[e]`.
    pub fn segment_sum(&mut self, x: Var, segments: &[usize], num_segments: usize) -> Result<Var> {
        let xv = self.value(x);
        if segments.len() != xv.rows() {
            return Err(Error::dim(
                "segment_sum",
                format!("{} segment ids for {} rows", segments.len(), xv.rows()),
            ));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= num_segments) {
            return Err(Error::Index {
                op: "segment_sum",
                index: bad,
                len: num_segments,
            });
        }
        let mut value = Matrix::zeros(num_segments, xv.cols());
        for (e, &s) in segments.iter().enumerate() {
            for (o, v) in value.row_mut(s).iter_mut().zip(xv.row(e)) {
                *o += v;
            }
        }
        self.push("segment_sum", Op::SegmentSum(x, segments.into()), value)
    }

    /// Constant sparse matrix times a dense node. No gradient flows into the sparse values.
    pub fn sparse_mat_mul(&mut self, s: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        self.spmm(s, None, x)
    }

    /// Sparse pattern of `s` with per-entry values taken from the nnz×1 node `weights`,
    /// times a dense node. Gradients flow into both `weights` and `x`.
    pub fn weighted_sparse_mat_mul(
        &mut self,
        s: &Arc<SparseMatrix>,
        weights: Var,
        x: Var,
    ) -> Result<Var> {
        if self.shape(weights) != (s.nnz(), 1) {
            return Err(Error::dim(
                "weighted_sparse_mat_mul",
                format!("weights {:?} for {} entries", self.shape(weights), s.nnz()),
            ));
        }
        self.spmm(s, Some(weights), x)
    }

    fn spmm(&mut self, s: &Arc<SparseMatrix>, weights: Option<Var>, x: Var) -> Result<Var> {
        if s.cols() != self.shape(x).0 {
            return Err(Error::dim(
                "sparse_mat_mul",
                format!("{}x{} · {:?}", s.rows(), s.cols(), self.shape(x)),
            ));
        }
        let value = s.spmm(weights.map(|w| self.value(w).data()), self.value(x));
        self.push(
            "sparse_mat_mul",
            Op::SpMM {
                matrix: Arc::clone(s),
                weights,
                x,
            },
            value,
        )
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_row_normalize(&mut self, m: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract("l2_row_normalize needs eps > 0".into()));
        }
        let mut value = self.value(m).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.push("l2_row_normalize", Op::L2RowNormalize(m, eps), value)
    }

    /// n×n matrix of squared Euclidean distances between rows.
    pub fn pairwise_sq_dist(&mut self, m: Var) -> Result<Var> {
        let x = self.value(m);
        let n = x.rows();
        let gram = x.matmul_t(x);
        let mut value = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let d = if i == j {
                    0.0
                } else {
                    (gram.get(i, i) + gram.get(j, j) - 2.0 * gram.get(i, j)).max(0.0)
                };
                value.set(i, j, d);
            }
        }
        self.push("pairwise_sq_dist", Op::PairwiseSqDist(m), value)
    }

    /// `H · K · H` with the centering matrix `H = I − 𝟙𝟙ᵀ/n`.
    pub fn double_center(&mut self, k: Var) -> Result<Var> {
        let (r, c) = self.shape(k);
        if r != c {
            return Err(Error::dim(
                "double_center",
                format!("{r}x{c} is not square"),
            ));
        }
        let value = double_center(self.value(k));
        self.push("double_center", Op::DoubleCenter(k), value)
    }

    pub fn log_softmax_rows(&mut self, m: Var) -> Result<Var> {
        let mut value = self.value(m).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("log_softmax_rows", Op::LogSoftmaxRows(m), value)
    }

    /// Reverse sweep from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                if grads[i].is_none() {
                    let (r, c) = node.value.shape();
                    grads[i] = Some(Matrix::zeros(r, c));
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, contribution: Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Accumulates through a closure that writes into a zeroed buffer shaped like `v`.
    fn accumulate_with(&self, grads: &mut [Option<Matrix>], v: Var, f: impl FnOnce(&mut Matrix)) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.shape(v);
            *slot = Some(Matrix::zeros(r, c));
        }
        f(slot.as_mut().expect("initialized above"));
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::ConstMatMul(a, x) => self.accumulate(grads, *x, a.t_matmul(g)),
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Binary(op, a, b) => match op {
                Binary::Add => {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, g.clone());
                }
                Binary::Sub => {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, g.scale(-1.0));
                }
                Binary::Mul => {
                    if self.ng(*a) {
                        self.accumulate(grads, *a, g.zip_map(self.value(*b), |p, q| p * q));
                    }
                    if self.ng(*b) {
                        self.accumulate(grads, *b, g.zip_map(self.value(*a), |p, q| p * q));
                    }
                }
            },
            Op::Unary(op, a) => {
                let x = self.value(*a);
                let local = match op {
                    Unary::Neg => g.scale(-1.0),
                    Unary::Exp => g.zip_map(y, |p, q| p * q),
                    Unary::Log => g.zip_map(x, |p, q| p / q),
                    Unary::Sigmoid => g.zip_map(y, |p, s| p * s * (1.0 - s)),
                    Unary::LogSigmoid => g.zip_map(x, |p, v| p * sigmoid(-v)),
                    Unary::Tanh => g.zip_map(y, |p, t| p * (1.0 - t * t)),
                    Unary::Abs => g.zip_map(x, |p, v| {
                        if v > 0.0 {
                            p
                        } else if v < 0.0 {
                            -p
                        } else {
                            0.0
                        }
                    }),
                };
                self.accumulate(grads, *a, local);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::InvSqrt(a) => self.accumulate(grads, *a, g.zip_map(y, |p, s| -0.5 * p * s * s * s)),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::RowSums(a) => self.accumulate_with(grads, *a, |acc| {
                for r in 0..acc.rows() {
                    let gv = g.get(r, 0);
                    acc.row_mut(r).iter_mut().for_each(|v| *v += gv);
                }
            }),
            Op::AddRowBroadcast(m, row) => {
                self.accumulate(grads, *m, g.clone());
                self.accumulate_with(grads, *row, |acc| {
                    for r in 0..g.rows() {
                        for (a, v) in acc.row_mut(0).iter_mut().zip(g.row(r)) {
                            *a += v;
                        }
                    }
                });
            }
            Op::Gather(m, idx) => self.accumulate_with(grads, *m, |acc| {
                for (i, &src) in idx.iter().enumerate() {
                    for (a, v) in acc.row_mut(src).iter_mut().zip(g.row(i)) {
                        *a += v;
                    }
                }
            }),
            Op::SliceRows(m, start) => self.accumulate_with(grads, *m, |acc| {
                let cols = acc.cols();
                let dst = &mut acc.data_mut()[start * cols..(start + g.rows()) * cols];
                for (a, v) in dst.iter_mut().zip(g.data()) {
                    *a += v;
                }
            }),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.ng(p) {
                        let cols = g.cols();
                        let slice = g.data()[off * cols..(off + rows) * cols].to_vec();
                        self.accumulate(
                            grads,
                            p,
                            Matrix::from_vec(rows, cols, slice).expect("shape from parts"),
                        );
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.ng(p) {
                        let mut part = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            part.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.accumulate(grads, p, part);
                    }
                    off += cols;
                }
            }
            Op::SegmentSum(x, seg) => self.accumulate_with(grads, *x, |acc| {
                for (e, &s) in seg.iter().enumerate() {
                    for (a, v) in acc.row_mut(e).iter_mut().zip(g.row(s)) {
                        *a += v;
                    }
                }
            }),
            Op::SpMM { matrix, weights, x } => {
                let wvals = weights.map(|w| self.value(w).data());
                self.accumulate_with(grads, *x, |acc| matrix.spmm_t_acc(wvals, g, acc));
                if let Some(w) = weights {
                    let xv = self.value(*x);
                    self.accumulate_with(grads, *w, |acc| {
                        let cols = matrix.col_indices();
                        for r in 0..matrix.rows() {
                            let gr = g.row(r);
                            for e in matrix.row_range(r) {
                                let dot: f64 =
                                    gr.iter().zip(xv.row(cols[e])).map(|(p, q)| p * q).sum();
                                acc.data_mut()[e] += dot;
                            }
                        }
                    });
                }
            }
            Op::L2RowNormalize(m, eps) => {
                let x = self.value(*m);
                self.accumulate_with(grads, *m, |acc| {
                    for r in 0..x.rows() {
                        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let out = acc.row_mut(r);
                        if norm > *eps {
                            let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for k in 0..out.len() {
                                out[k] += (gr[k] - yr[k] * yg) / norm;
                            }
                        } else {
                            for k in 0..out.len() {
                                out[k] += gr[k] / eps;
                            }
                        }
                    }
                });
            }
            Op::PairwiseSqDist(m) => {
                let x = self.value(*m);
                let n = x.rows();
                let mut s = g.clone();
                for i in 0..n {
                    for j in 0..n {
                        s.set(i, j, g.get(i, j) + g.get(j, i));
                    }
                }
                let sx = s.matmul(x);
                self.accumulate_with(grads, *m, |acc| {
                    for i in 0..n {
                        let rs: f64 = s.row(i).iter().sum();
                        let xr = x.row(i);
                        let sxr = sx.row(i);
                        for (k, a) in acc.row_mut(i).iter_mut().enumerate() {
                            *a += 2.0 * (rs * xr[k] - sxr[k]);
                        }
                    }
                });
            }
            Op::DoubleCenter(k) => self.accumulate(grads, *k, double_center(g)),
            Op::LogSoftmaxRows(m) => self.accumulate_with(grads, *m, |acc| {
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let gs: f64 = gr.iter().sum();
                    let yr = y.row(r);
                    for (k, a) in acc.row_mut(r).iter_mut().enumerate() {
                        *a += gr[k] - yr[k].exp() * gs;
                    }
                }
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::finite_diff_check;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn mat_mul_values() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = t.constant(m(&[&[0.0], &[1.0]])).unwrap();
        let c = t.mat_mul(a, b).unwrap();
        assert_eq!(t.value(c), &m(&[&[2.0], &[4.0]]));

        let i = t.constant(Matrix::identity(2)).unwrap();
        let ia = t.mat_mul(i, a).unwrap();
        assert_eq!(t.value(ia), t.value(a));

        assert!(matches!(t.mat_mul(b, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn elementwise_values_and_domain() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::scalar(0.0)).unwrap();
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.scalar(s), 0.5);

        let x = t.constant(Matrix::scalar(1.7)).unwrap();
        let e = t.exp(x).unwrap();
        let l = t.log(e).unwrap();
        assert!((t.scalar(l) - 1.7).abs() < 1e-15);

        let neg = t.constant(Matrix::scalar(-1.0)).unwrap();
        assert!(matches!(t.log(neg), Err(Error::Domain { .. })));
        assert!(matches!(t.log(z), Err(Error::Domain { .. })));
    }

    #[test]
    fn non_finite_values_rejected_at_creation() {
        let mut t = Tape::new();
        assert!(matches!(
            t.constant(Matrix::scalar(f64::NAN)),
            Err(Error::NonFinite { .. })
        ));
        let big = t.constant(Matrix::scalar(1000.0)).unwrap();
        assert!(matches!(t.exp(big), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[-800.0, 0.0, 800.0]])).unwrap();
        let y = t.log_sigmoid(x).unwrap();
        let v = t.value(y);
        assert_eq!(v.get(0, 0), -800.0);
        assert!((v.get(0, 1) + std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(v.get(0, 2), 0.0);
    }

    #[test]
    fn row_gather_cases() {
        let mut t = Tape::new();
        let p = t
            .parameter(m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]))
            .unwrap();
        let g = t.row_gather(p, &[1]).unwrap();
        assert_eq!(t.value(g), &m(&[&[3.0, 4.0]]));

        let empty = t.row_gather(p, &[]).unwrap();
        assert_eq!(t.shape(empty), (0, 2));

        assert!(matches!(t.row_gather(p, &[3]), Err(Error::Index { .. })));

        let twice = t.row_gather(p, &[0, 0]).unwrap();
        let s = t.sum(twice).unwrap();
        let grads = t.backward(s).unwrap();
        assert_eq!(
            grads.get(p).unwrap(),
            &m(&[&[2.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]])
        );
    }

    #[test]
    fn sparse_mat_mul_cases() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let id = Arc::new(SparseMatrix::identity(2));
        let y = t.sparse_mat_mul(&id, x).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let swap =
            Arc::new(SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap());
        let y = t.sparse_mat_mul(&swap, x).unwrap();
        assert_eq!(t.value(y), &m(&[&[3.0, 4.0], &[1.0, 2.0]]));

        let wide = Arc::new(SparseMatrix::identity(3));
        assert!(t.sparse_mat_mul(&wide, x).is_err());
    }

    #[test]
    fn l2_row_normalize_cases() {
        let mut t = Tape::new();
        let x = t
            .constant(m(&[&[3.0, 4.0], &[0.0, 0.0], &[0.6, 0.8]]))
            .unwrap();
        let y = t.l2_row_normalize(x, 1e-12).unwrap();
        let v = t.value(y);
        assert!((v.get(0, 0) - 0.6).abs() < 1e-15 && (v.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(v.row(1), &[0.0, 0.0]);
        assert!((v.get(2, 0) - 0.6).abs() < 1e-15 && (v.get(2, 1) - 0.8).abs() < 1e-15);
        assert!(t.l2_row_normalize(x, 0.0).is_err());
    }

    #[test]
    fn backward_trivial_cases() {
        let mut t = Tape::new();
        let p = t.parameter(Matrix::filled(2, 3, 0.7)).unwrap();
        let q = t.parameter(Matrix::filled(1, 2, 0.1)).unwrap();
        let s = t.sum(p).unwrap();
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap(), &Matrix::filled(2, 3, 1.0));
        assert_eq!(grads.get(q).unwrap(), &Matrix::zeros(1, 2));

        assert!(matches!(t.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_of_sum_of_product() {
        let a = m(&[&[0.3, -1.2, 0.5], &[2.0, 0.1, -0.7]]);
        let b = m(&[&[1.0, 0.2], &[-0.4, 0.9], &[0.3, -1.1]]);
        let err = finite_diff_check(&[a, b], 1e-5, |t, p| {
            let c = t.mat_mul(p[0], p[1])?;
            t.sum(c)
        })
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn sigmoid_derivative_at_two() {
        let err = finite_diff_check(&[Matrix::scalar(2.0)], 1e-5, |t, p| {
            let s = t.sigmoid(p[0])?;
            t.sum(s)
        })
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let x = m(&[&[0.3, -1.2, 0.5], &[2.0, 0.1, -0.7], &[0.4, 0.4, 1.1]]);
        let w = m(&[&[0.5], &[-0.3], &[0.8], &[1.2]]);
        let bias = m(&[&[0.1, -0.2, 0.3]]);
        let s = Arc::new(
            SparseMatrix::from_triplets(
                3,
                3,
                vec![(0, 1, 0.5), (1, 0, 0.7), (1, 2, -0.2), (2, 2, 1.0)],
            )
            .unwrap(),
        );
        let err = finite_diff_check(&[x, w, bias], 1e-5, |t, p| {
            let (x, w, bias) = (p[0], p[1], p[2]);
            let xt = t.transpose(x)?;
            let a = t.mat_mul(x, xt)?;
            let a = t.tanh(a)?;
            let d = t.pairwise_sq_dist(x)?;
            let d = t.scale(d, -0.5)?;
            let k = t.exp(d)?;
            let kc = t.double_center(k)?;
            let prod = t.mul(kc, a)?;
            let mixer = Arc::new(m(&[&[1.0, -0.5, 0.2], &[0.3, 0.0, 2.0]]));
            let cm = t.const_mat_mul(&mixer, prod)?;
            let total1 = t.sum(cm)?;

            let xb = t.add_row(x, bias)?;
            let xn = t.l2_row_normalize(xb, 1e-12)?;
            let ls = t.log_softmax_rows(xn)?;
            let sp = t.sparse_mat_mul(&s, ls)?;
            let sw = t.weighted_sparse_mat_mul(&s, w, sp)?;
            let g = t.row_gather(sw, &[2, 0, 2])?;
            let sl = t.slice_rows(sw, 1, 2)?;
            let cat = t.concat_rows(&[g, sl])?;
            let cc = t.concat_cols(&[cat, cat])?;
            let sg = t.segment_sum(cc, &[0, 1, 0, 2, 1], 3)?;
            let ab = t.abs(sg)?;
            let shifted = t.constant(Matrix::filled(3, 6, 0.5))?;
            let pos = t.add(ab, shifted)?;
            let is = t.inv_sqrt(pos, 1e-12)?;
            let lg = t.log(pos)?;
            let mixed = t.sub(is, lg)?;
            let neg = t.neg(mixed)?;
            let ls2 = t.log_sigmoid(neg)?;
            let sg2 = t.sigmoid(ls2)?;
            let rs = t.row_sums(sg2)?;
            let total2 = t.sum(rs)?;
            t.add(total1, total2)
        })
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let build = || {
            let mut t = Tape::new();
            let x = t
                .constant(m(&[&[0.3, -1.2, 0.5], &[2.0, 0.1, -0.7]]))
                .unwrap();
            let d = t.pairwise_sq_dist(x).unwrap();
            let e = t.exp(d).unwrap();
            let c = t.double_center(e).unwrap();
            t.value(c).clone()
        };
        assert_eq!(build().data(), build().data());
    }
}
