use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

/// Compressed sparse row matrix with fixed (non-learnable) values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from `(row, col, value)` triplets. Duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { n_rows, n_cols, row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n_rows, self.n_cols]);
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                t.set(r, c, t.get(r, c) + v);
            }
        }
        t
    }

    /// `self · x`
    pub fn matmul(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        if x.rows() != self.n_cols {
            return Err(NumericsError::ShapeMismatch {
                op: "spmm",
                detail: format!("{}x{} sparse times {:?}", self.n_rows, self.n_cols, x.shape()),
            });
        }
        let d = x.cols();
        let mut out = vec![0.0; self.n_rows * d];
        let xs = x.data();
        for r in 0..self.n_rows {
            let dst = &mut out[r * d..(r + 1) * d];
            for (c, v) in self.row(r) {
                let src = &xs[c * d..(c + 1) * d];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
        Tensor::matrix(self.n_rows, d, out)
    }

    /// `selfᵀ · g`
    pub fn transpose_matmul(&self, g: &Tensor) -> Tensor {
        let d = g.cols();
        let mut out = vec![0.0; self.n_cols * d];
        let gs = g.data();
        for r in 0..self.n_rows {
            let src = &gs[r * d..(r + 1) * d];
            for (c, v) in self.row(r) {
                let dst = &mut out[c * d..(c + 1) * d];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
        Tensor::matrix(self.n_cols, d, out).expect("consistent dims")
    }
}
