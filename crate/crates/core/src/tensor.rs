//! Dense row-major matrices and the GEMM entry points used by the model.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data does not match shape");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm_into(&mut out, self, false, rhs, false, 1.0, 0.0);
        out
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(&self, rhs: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        gemm_into(&mut out, self, false, rhs, true, 1.0, 0.0);
        out
    }

    /// Row selection.
    pub fn gather_rows(&self, ids: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(ids.len(), self.cols);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(id));
        }
        out
    }
}

/// Strided view of a matrix operand for [`gemm_raw`].
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn of(m: &'a Matrix, transpose: bool) -> Self {
        if transpose {
            Self { data: &m.data, offset: 0, row_stride: 1, col_stride: m.cols }
        } else {
            Self { data: &m.data, offset: 0, row_stride: m.cols, col_stride: 1 }
        }
    }

    /// Column block `[col0, col0 + width)` of a row-major matrix with `cols`
    /// columns, optionally transposed.
    pub fn columns(data: &'a [f64], cols: usize, col0: usize, transpose: bool) -> Self {
        if transpose {
            Self { data, offset: col0, row_stride: 1, col_stride: cols }
        } else {
            Self { data, offset: col0, row_stride: cols, col_stride: 1 }
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "gemm operand out of bounds");
    }
}

pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> ViewMut<'a> {
    pub fn of(m: &'a mut Matrix) -> Self {
        let cols = m.cols;
        Self { data: &mut m.data, offset: 0, row_stride: cols, col_stride: 1 }
    }

    pub fn columns(data: &'a mut [f64], cols: usize, col0: usize) -> Self {
        Self { data, offset: col0, row_stride: cols, col_stride: 1 }
    }
}

/// `C ← alpha·A·B + beta·C` with `A: m×k`, `B: k×n`, `C: m×n` given as
/// strided views.
pub(crate) fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: ViewMut<'_>,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    if k > 0 {
        let last = c.offset + (m - 1) * c.row_stride + (n - 1) * c.col_stride;
        assert!(last < c.data.len(), "gemm output out of bounds");
    }
    if k == 0 {
        // matrixmultiply handles k = 0, but keep the beta semantics explicit
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.row_stride + j * c.col_stride;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: all index ranges were bounds-checked above; operands do not alias
    // because `c` is borrowed mutably while `a` and `b` are shared borrows.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}

/// `out ← alpha·op(a)·op(b) + beta·out`.
pub fn gemm_into(out: &mut Matrix, a: &Matrix, ta: bool, b: &Matrix, tb: bool, alpha: f64, beta: f64) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimensions differ");
    assert_eq!((out.rows, out.cols), (m, n), "gemm output shape");
    gemm_raw(m, k, n, alpha, View::of(a, ta), View::of(b, tb), beta, ViewMut::of(out));
}
