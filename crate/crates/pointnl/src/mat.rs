//! Dense row-major f64 matrix.
//!
//! All arithmetic in this crate runs in double precision and reduces in
//! ascending index order, so results are bit-reproducible run to run.
//! Every `Mat` buffer is registered with [`crate::stats`], which is how the
//! bench command measures peak transient-buffer bytes without touching the
//! process allocator.

use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        stats::track_alloc((rows * cols * 8) as u64);
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec length mismatch");
        stats::track_alloc((rows * cols * 8) as u64);
        Mat { rows, cols, data }
    }

    /// Build row by row from a generator; rows are filled in ascending order.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    /// Collect the given rows of `self` into a new matrix, in the order given.
    pub fn gather_rows(&self, indices: &[usize]) -> Mat {
        let mut out = Mat::zeros(indices.len(), self.cols);
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }

    /// self += other, elementwise.
    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("{what} contains non-finite entries")));
        }
        Ok(())
    }

    /// out[d] = sum_c self[c][d] * x[c], c ascending. This is W^T x for a
    /// C x D weight matrix.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for c in 0..self.rows {
            let xc = x[c];
            let row = self.row(c);
            for d in 0..self.cols {
                out[d] += row[d] * xc;
            }
        }
        out
    }

    /// out[c] = sum_d self[c][d] * y[d]. This is W y for a C x D weight matrix.
    pub fn matvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for c in 0..self.rows {
            let row = self.row(c);
            let mut acc = 0.0;
            for d in 0..self.cols {
                acc += row[d] * y[d];
            }
            out[c] = acc;
        }
        out
    }

    /// Plain matrix product, i-k-j loop order.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = out.row_mut(i);
                for j in 0..other.cols {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    /// self[i] += x[i] * y[j] (rank-one update), used for weight gradients.
    pub fn add_outer(&mut self, x: &[f64], y: &[f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for i in 0..self.rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            let row = self.row_mut(i);
            for j in 0..y.len() {
                row[j] += xi * y[j];
            }
        }
    }
}

impl Clone for Mat {
    fn clone(&self) -> Self {
        stats::track_alloc((self.rows * self.cols * 8) as u64);
        Mat { rows: self.rows, cols: self.cols, data: self.data.clone() }
    }
}

impl Drop for Mat {
    fn drop(&mut self) {
        stats::track_free((self.rows * self.cols * 8) as u64);
    }
}

impl PartialEq for Mat {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.data == other.data
    }
}
