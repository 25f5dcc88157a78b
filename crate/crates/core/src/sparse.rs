//! Compressed sparse row matrices with constant values.
//!
//! Entries are kept in row-major order. That order is the canonical edge
//! order: any dense per-edge vector (fusion values, mask probabilities)
//! lines up with [`SparseMatrix::entries`].

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets in any order.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        for &(r, c, v) in &triplets {
            if r >= rows || c >= cols {
                return Err(Error::Structure(format!(
                    "entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            if !v.is_finite() {
                return Err(Error::Structure(format!("entry ({r}, {c}) is not finite")));
            }
        }
        triplets.sort_by_key(|a| (a.0, a.1));
        if let Some(w) = triplets
            .windows(2)
            .find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1))
        {
            return Err(Error::Structure(format!(
                "duplicate entry ({}, {})",
                w[0].0, w[0].1
            )));
        }
        let mut row_ptr = vec![0usize; rows + 1];
        for &(r, _, _) in &triplets {
            row_ptr[r + 1] += 1;
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(SparseMatrix {
            rows,
            cols,
            row_ptr,
            col_idx: triplets.iter().map(|t| t.1).collect(),
            values: triplets.iter().map(|t| t.2).collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_idx
    }

    /// Row index of every stored entry, in entry order.
    pub fn row_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            out.extend(std::iter::repeat_n(
                r,
                self.row_ptr[r + 1] - self.row_ptr[r],
            ));
        }
        out
    }

    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        self.row_ptr[r]..self.row_ptr[r + 1]
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            self.row_range(r)
                .map(move |e| (r, self.col_idx[e], self.values[e]))
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.row_range(r);
        match self.col_idx[range.clone()].binary_search(&c) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    /// Same sparsity pattern with new per-entry values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.nnz() {
            return Err(Error::dim(
                "SparseMatrix::with_values",
                format!("{} values for {} entries", values.len(), self.nnz()),
            ));
        }
        Ok(SparseMatrix {
            values,
            ..self.clone()
        })
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && self
                .entries()
                .all(|(r, c, v)| (self.get(c, r) - v).abs() <= tol)
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.entries() {
            m.set(r, c, v);
        }
        m
    }

    /// `out = S · x`, where `weights` (if given) replaces the stored values.
    pub(crate) fn spmm(&self, weights: Option<&[f64]>, x: &Matrix) -> Matrix {
        let vals = weights.unwrap_or(&self.values);
        let d = x.cols();
        let mut out = Matrix::zeros(self.rows, d);
        for r in 0..self.rows {
            let range = self.row_range(r);
            let orow = out.row_mut(r);
            for e in range {
                let w = vals[e];
                let xr = x.row(self.col_idx[e]);
                for (o, &xv) in orow.iter_mut().zip(xr) {
                    *o += w * xv;
                }
            }
        }
        out
    }

    /// `out = Sᵀ · g`, accumulated into `out`.
    pub(crate) fn spmm_t_acc(&self, weights: Option<&[f64]>, g: &Matrix, out: &mut Matrix) {
        let vals = weights.unwrap_or(&self.values);
        for r in 0..self.rows {
            let gr = g.row(r);
            for e in self.row_range(r) {
                let w = vals[e];
                let orow = out.row_mut(self.col_idx[e]);
                for (o, &gv) in orow.iter_mut().zip(gr) {
                    *o += w * gv;
                }
            }
        }
    }
}
