use crate::error::{GtpError, Result};

use super::Tensor;

/// Compressed sparse row matrix, used for constant graph operators.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|&&(r, c, _)| r >= rows || c >= cols) {
            return Err(GtpError::invalid(format!("entry ({r}, {c}) outside {rows}×{cols}")));
        }
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: values.to_vec(),
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

    /// Nonzeros of row `r` as `(col, value)` pairs.
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                out.set(r, c, v);
            }
        }
        out
    }

    /// `self · x` for a row-major `x` with `n` columns.
    pub fn matmul(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * n];
        for r in 0..self.rows {
            let dst = &mut out[r * n..(r + 1) * n];
            for (c, v) in self.row_entries(r) {
                for (d, s) in dst.iter_mut().zip(&x[c * n..(c + 1) * n]) {
                    *d += v * s;
                }
            }
        }
        out
    }

    /// `out += selfᵀ · g` for a row-major `g` with `n` columns.
    pub fn transpose_matmul_acc(&self, g: &[f64], n: usize, out: &mut [f64]) {
        for r in 0..self.rows {
            let src = &g[r * n..(r + 1) * n];
            for (c, v) in self.row_entries(r) {
                for (d, s) in out[c * n..(c + 1) * n].iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }
}
