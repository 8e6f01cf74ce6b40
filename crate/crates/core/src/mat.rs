//! Dense row-major `f64` matrices sized for desk-scale experiments.
//!
//! Everything downstream (attention forwards, gradient algebra, the autodiff
//! tape) works on this one type.  Loops are written with fixed iteration
//! order; given identical inputs the same bits come out, which the
//! reproducibility contracts elsewhere rely on.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Index, IndexMut};

use crate::error::{CoreError, Result};

#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Build from row-major data; `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Column vector from a slice.
    pub fn col_vec(v: &[f64]) -> Self {
        Mat { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    /// Row vector from a slice.
    pub fn row_vec(v: &[f64]) -> Self {
        Mat { rows: 1, cols: v.len(), data: v.to_vec() }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self * other`.  Inner loop runs over `k` then `j` so rows of `other`
    /// are walked contiguously.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols, other.rows,
            "matmul {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                let o_row = out.row_mut(i);
                for j in 0..b_row.len() {
                    o_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(CoreError::ShapeMismatch { op: "add", lhs: self.shape(), rhs: other.shape() });
        }
        let mut out = self.clone();
        for (o, &x) in out.data.iter_mut().zip(&other.data) {
            *o += x;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(CoreError::ShapeMismatch { op: "sub", lhs: self.shape(), rhs: other.shape() });
        }
        let mut out = self.clone();
        for (o, &x) in out.data.iter_mut().zip(&other.data) {
            *o -= x;
        }
        Ok(out)
    }

    /// `self += alpha * other`; shapes must match.
    pub fn axpy(&mut self, alpha: f64, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (o, &x) in self.data.iter_mut().zip(&other.data) {
            *o += alpha * x;
        }
    }

    pub fn scale(&self, alpha: f64) -> Mat {
        let mut out = self.clone();
        for o in &mut out.data {
            *o *= alpha;
        }
        out
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        for o in &mut self.data {
            *o *= alpha;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        let mut out = self.clone();
        for o in &mut out.data {
            *o = f(*o);
        }
        out
    }

    /// Copy of the half-open block `[r0, r1) x [c0, c1)`.
    pub fn block(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Mat {
        assert!(r0 <= r1 && r1 <= self.rows && c0 <= c1 && c1 <= self.cols, "block out of range");
        let mut out = Mat::zeros(r1 - r0, c1 - c0);
        for i in r0..r1 {
            out.row_mut(i - r0).copy_from_slice(&self.row(i)[c0..c1]);
        }
        out
    }

    /// Write `src` into self with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, src: &Mat) {
        assert!(r0 + src.rows <= self.rows && c0 + src.cols <= self.cols, "set_block out of range");
        for i in 0..src.rows {
            self.row_mut(r0 + i)[c0..c0 + src.cols].copy_from_slice(src.row(i));
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn vstack(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "vstack column mismatch");
        let mut data = Vec::with_capacity((self.rows + other.rows) * self.cols);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Mat { rows: self.rows + other.rows, cols: self.cols, data }
    }

    pub fn frob_dot(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape(), "frob_dot shape mismatch");
        let mut s = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            s += a * b;
        }
        s
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.frob_dot(self)
    }

    pub fn frob_norm(&self) -> f64 {
        crate::mathx::sqrt(self.frob_norm_sq())
    }

    /// Largest absolute entry difference; both shapes must match.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        let mut m = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = crate::mathx::abs(a - b);
            if d > m {
                m = d;
            }
        }
        m
    }

    /// Exact bit equality, distinguishing 0.0 from -0.0 and any NaN payloads.
    pub fn bit_eq(&self, other: &Mat) -> bool {
        self.shape() == other.shape()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                write!(f, "{:>12.6} ", self[(i, j)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

/// Dot product of two equal-length slices, accumulated left to right.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot length mismatch");
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Outer product `a bᵀ` as an `a.len() x b.len()` matrix.
pub fn outer(a: &[f64], b: &[f64]) -> Mat {
    let mut m = Mat::zeros(a.len(), b.len());
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            m[(i, j)] = x * y;
        }
    }
    m
}

pub fn norm2(a: &[f64]) -> f64 {
    crate::mathx::sqrt(dot(a, a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_example() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Mat::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity() {
        let a = Mat::from_rows(&[&[1.5, -2.0, 0.25], &[0.0, 3.0, 1.0]]);
        assert!(a.matmul(&Mat::eye(3)).bit_eq(&a));
        assert!(Mat::eye(2).matmul(&a).bit_eq(&a));
    }

    #[test]
    fn transpose_involution() {
        let a = Mat::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert!(a.transpose().transpose().bit_eq(&a));
        assert_eq!(a.transpose().shape(), (3, 2));
        assert_eq!(a.transpose()[(2, 1)], 6.0);
    }

    #[test]
    fn block_roundtrip() {
        let a = Mat::from_fn(4, 5, |i, j| (i * 5 + j) as f64);
        let b = a.block(1, 3, 2, 5);
        assert_eq!(b.shape(), (2, 3));
        assert_eq!(b[(0, 0)], 7.0);
        let mut c = Mat::zeros(4, 5);
        c.set_block(1, 2, &b);
        assert_eq!(c[(2, 4)], 14.0);
        assert_eq!(c[(0, 0)], 0.0);
    }

    #[test]
    fn outer_example() {
        let m = outer(&[1.0, 0.0], &[1.0, 0.0]);
        assert_eq!(m.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn vstack_shapes() {
        let a = Mat::zeros(2, 3);
        let b = Mat::from_fn(1, 3, |_, j| j as f64);
        let s = a.vstack(&b);
        assert_eq!(s.shape(), (3, 3));
        assert_eq!(s.row(2), &[0.0, 1.0, 2.0]);
    }

    #[test]
    #[should_panic]
    fn matmul_shape_panics() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(2, 3);
        let _ = a.matmul(&b);
    }

    #[test]
    fn add_shape_error() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(3, 2);
        assert!(matches!(a.add(&b), Err(CoreError::ShapeMismatch { .. })));
    }
}
