//! Row-major dense `f64` matrices.
//!
//! All products are computed with a fixed per-element accumulation order, so
//! results are bit-identical whether the `parallel` feature is enabled or not
//! and regardless of thread count: parallelism only partitions output rows,
//! never a reduction.

use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Products with at least this many multiply-adds go through the parallel
/// path when the `parallel` feature is enabled. Below this, per-row work is
/// too small to amortize the fork-join overhead.
const PAR_MIN_FLOPS: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MatrixError {
    #[error("data length {len} does not match {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, len: usize },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyDimension { rows: usize, cols: usize },
}

/// A dense 2-D array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, validating the length.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatrixError> {
        if data.len() != rows * cols {
            return Err(MatrixError::LengthMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds from a closure over (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Shorthand for [`DenseMatrix::transpose`].
    pub fn t(&self) -> Self {
        self.transpose()
    }

    /// `self * rhs`, parallel over output rows when worthwhile.
    pub fn matmul(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        #[cfg(feature = "parallel")]
        if self.rows * self.cols * rhs.cols >= PAR_MIN_FLOPS {
            let n = rhs.cols;
            out.data
                .par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out_row)| matmul_row(self, rhs, i, out_row));
            return out;
        }
        self.matmul_seq_into(rhs, &mut out);
        out
    }

    /// `self * rhs` on a single thread, regardless of features. The result is
    /// bit-identical to [`DenseMatrix::matmul`].
    pub fn matmul_seq(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        self.matmul_seq_into(rhs, &mut out);
        out
    }

    fn matmul_seq_into(&self, rhs: &DenseMatrix, out: &mut DenseMatrix) {
        let n = rhs.cols;
        if n == 0 {
            return;
        }
        for (i, out_row) in out.data.chunks_mut(n).enumerate() {
            matmul_row(self, rhs, i, out_row);
        }
    }

    /// Horizontal concatenation `[self | right]`.
    pub fn hcat(&self, right: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, right.rows, "hcat row mismatch");
        let cols = self.cols + right.cols;
        let mut out = DenseMatrix::zeros(self.rows, cols);
        for i in 0..self.rows {
            out.data[i * cols..i * cols + self.cols].copy_from_slice(self.row(i));
            out.data[i * cols + self.cols..(i + 1) * cols].copy_from_slice(right.row(i));
        }
        out
    }

    /// Vertical concatenation `[self; bottom]`.
    pub fn vcat(&self, bottom: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, bottom.cols, "vcat column mismatch");
        let mut data = Vec::with_capacity((self.rows + bottom.rows) * self.cols);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&bottom.data);
        DenseMatrix {
            rows: self.rows + bottom.rows,
            cols: self.cols,
            data,
        }
    }

    /// Scales row `i` by `diag[i]`, i.e. left-multiplication by a diagonal
    /// matrix.
    pub fn scale_rows(&self, diag: &[f64]) -> DenseMatrix {
        assert_eq!(self.rows, diag.len(), "scale_rows diagonal length mismatch");
        let mut out = self.clone();
        if self.cols == 0 {
            return out;
        }
        for (row, d) in out.data.chunks_mut(self.cols).zip(diag) {
            for x in row.iter_mut() {
                *x *= d;
            }
        }
        out
    }

    /// Scales column `j` by `diag[j]`, i.e. right-multiplication by a
    /// diagonal matrix.
    pub fn scale_cols(&self, diag: &[f64]) -> DenseMatrix {
        assert_eq!(self.cols, diag.len(), "scale_cols diagonal length mismatch");
        let mut out = self.clone();
        if self.cols == 0 {
            return out;
        }
        for row in out.data.chunks_mut(self.cols) {
            for (x, d) in row.iter_mut().zip(diag) {
                *x *= d;
            }
        }
        out
    }

    pub fn add(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "add shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "sub shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a - b)
            .collect();
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, c: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    pub fn fro_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, rhs: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "diff shape mismatch");
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Copies the listed columns into a new matrix, in the given order.
    pub fn select_cols(&self, indices: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, indices.len());
        for (jo, &js) in indices.iter().enumerate() {
            assert!(js < self.cols, "column index out of range");
            for i in 0..self.rows {
                out.set(i, jo, self.get(i, js));
            }
        }
        out
    }

    /// Copies the listed rows into a new matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(indices.len(), self.cols);
        for (io, &is) in indices.iter().enumerate() {
            assert!(is < self.rows, "row index out of range");
            out.data[io * self.cols..(io + 1) * self.cols]
                .copy_from_slice(self.row(is));
        }
        out
    }
}

#[inline]
fn matmul_row(a: &DenseMatrix, b: &DenseMatrix, i: usize, out_row: &mut [f64]) {
    let inner = a.cols;
    let n = b.cols;
    let a_row = &a.data[i * inner..(i + 1) * inner];
    for (k, &aik) in a_row.iter().enumerate() {
        if aik == 0.0 {
            continue;
        }
        let b_row = &b.data[k * n..(k + 1) * n];
        for (o, &bkj) in out_row.iter_mut().zip(b_row) {
            *o += aik * bkj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(matches!(
            DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0]),
            Err(MatrixError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn matmul_small() {
        let a = DenseMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = DenseMatrix::new(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_parallel_matches_seq_bitwise() {
        // 128^3 multiply-adds is above the parallel threshold.
        let n = 128;
        let a = DenseMatrix::from_fn(n, n, |i, j| ((i * 31 + j * 17) % 13) as f64 - 6.0);
        let b = DenseMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0);
        let c_par = a.matmul(&b);
        let c_seq = a.matmul_seq(&b);
        assert_eq!(c_par.data(), c_seq.data());
    }

    #[test]
    fn matmul_with_empty_operands() {
        let a = DenseMatrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let empty = DenseMatrix::zeros(2, 0);
        let out = a.matmul(&empty);
        assert_eq!((out.rows(), out.cols()), (3, 0));
        // Inner dimension zero gives an all-zero product.
        let wide = DenseMatrix::zeros(0, 4);
        let out = empty.matmul(&wide);
        assert_eq!((out.rows(), out.cols()), (2, 4));
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = DenseMatrix::from_fn(3, 5, |i, j| (i * 5 + j) as f64);
        assert_eq!(a.t().t(), a);
    }

    #[test]
    fn scale_cols_is_diagonal_product() {
        let a = DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let scaled = a.scale_cols(&[10.0, 0.5]);
        assert_eq!(scaled.data(), &[10.0, 1.0, 30.0, 2.0]);
    }

    #[test]
    fn select_rows_and_cols() {
        let a = DenseMatrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64);
        let r = a.select_rows(&[2, 0]);
        assert_eq!(r.data(), &[6.0, 7.0, 8.0, 0.0, 1.0, 2.0]);
        let c = a.select_cols(&[1]);
        assert_eq!(c.data(), &[1.0, 4.0, 7.0]);
    }
}
