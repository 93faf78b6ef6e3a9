//! Vectors and layout-tagged dense matrices.
//!
//! A [`Matrix`] `W ∈ ℝ^{n×m}` maps an input vector of length `m` (its column
//! count) to an output of length `n`. Storage is either row-major or
//! column-major; the logical element `(i, j)` is the same in both.

use std::fmt;
use std::ops::Deref;

use crate::error::{Result, TealError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    RowMajor,
    ColMajor,
}

impl Layout {
    pub fn as_str(self) -> &'static str {
        match self {
            Layout::RowMajor => "RowMajor",
            Layout::ColMajor => "ColMajor",
        }
    }

    pub fn parse(s: &str) -> Option<Layout> {
        match s {
            "RowMajor" => Some(Layout::RowMajor),
            "ColMajor" => Some(Layout::ColMajor),
            _ => None,
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dense vector. Immutable once handed to another module.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector<T>(Vec<T>);

impl<T: Scalar> Vector<T> {
    pub fn new(data: Vec<T>) -> Self {
        Vector(data)
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![T::zero(); len])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm_l2(&self) -> f64 {
        norm_l2(&self.0)
    }
}

impl<T> Deref for Vector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> From<Vec<T>> for Vector<T> {
    fn from(v: Vec<T>) -> Self {
        Vector(v)
    }
}

/// Euclidean norm accumulated in f64.
pub fn norm_l2<T: Scalar>(xs: &[T]) -> f64 {
    xs.iter()
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Euclidean norm of `a - b`, accumulated in f64.
pub fn diff_norm_l2<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.to_f64().unwrap_or(f64::NAN) - y.to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    layout: Layout,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, layout: Layout, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TealError::Shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix {
            rows,
            cols,
            layout,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize, layout: Layout) -> Self {
        Matrix {
            rows,
            cols,
            layout,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize, layout: Layout) -> Self {
        Self::from_fn(n, n, layout, |i, j| if i == j { T::one() } else { T::zero() })
    }

    /// Builds a matrix from a function of the logical index `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, layout: Layout, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        match layout {
            Layout::RowMajor => {
                for i in 0..rows {
                    for j in 0..cols {
                        data.push(f(i, j));
                    }
                }
            }
            Layout::ColMajor => {
                for j in 0..cols {
                    for i in 0..rows {
                        data.push(f(i, j));
                    }
                }
            }
        }
        Matrix {
            rows,
            cols,
            layout,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_inner(self) -> Vec<T> {
        self.data
    }

    /// Flat address of logical element `(i, j)`.
    #[inline]
    pub fn offset(&self, i: usize, j: usize) -> usize {
        match self.layout {
            Layout::RowMajor => i * self.cols + j,
            Layout::ColMajor => j * self.rows + i,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[self.offset(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let o = self.offset(i, j);
        self.data[o] = v;
    }

    /// (row stride, column stride) in elements.
    pub fn strides(&self) -> (isize, isize) {
        match self.layout {
            Layout::RowMajor => (self.cols as isize, 1),
            Layout::ColMajor => (1, self.rows as isize),
        }
    }

    /// Contiguous row `i`; only available for row-major storage.
    pub fn row(&self, i: usize) -> &[T] {
        assert_eq!(self.layout, Layout::RowMajor, "row() needs RowMajor");
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        assert_eq!(self.layout, Layout::RowMajor, "row_mut() needs RowMajor");
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Contiguous column `j`; only available for column-major storage.
    pub fn column(&self, j: usize) -> &[T] {
        assert_eq!(self.layout, Layout::ColMajor, "column() needs ColMajor");
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// Same logical matrix in another physical layout.
    pub fn to_layout(&self, layout: Layout) -> Matrix<T> {
        if layout == self.layout {
            return self.clone();
        }
        Matrix::from_fn(self.rows, self.cols, layout, |i, j| self.get(i, j))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            layout: self.layout,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Reference GEMV `y = x·Wᵀ` for `x ∈ ℝ^m`, `W ∈ ℝ^{n×m}`.
///
/// Every output `y_j` is accumulated in the scalar type in ascending input
/// index order, whatever the storage layout, so results are bit-identical
/// across layouts.
pub fn matmul_dense<T: Scalar>(x: &[T], w: &Matrix<T>) -> Result<Vector<T>> {
    if x.len() != w.cols() {
        return Err(TealError::Shape(format!(
            "input length {} does not match matrix {}x{} (expects {} columns)",
            x.len(),
            w.rows(),
            w.cols(),
            w.cols()
        )));
    }
    let n = w.rows();
    let mut y = vec![T::zero(); n];
    match w.layout() {
        Layout::RowMajor => {
            for (j, out) in y.iter_mut().enumerate() {
                let row = w.row(j);
                let mut acc = T::zero();
                for (xi, wi) in x.iter().zip(row) {
                    acc = acc + *xi * *wi;
                }
                *out = acc;
            }
        }
        Layout::ColMajor => {
            for (i, &xi) in x.iter().enumerate() {
                let col = w.column(i);
                for (out, &wji) in y.iter_mut().zip(col) {
                    *out = *out + xi * wji;
                }
            }
        }
    }
    Ok(Vector::new(y))
}

/// Batched `Y = X·Wᵀ` for `X ∈ ℝ^{s×m}` (any layout) and `W ∈ ℝ^{n×m}`.
/// Returns a row-major `s×n` matrix. Uses the blocked GEMM of the scalar
/// type; summation order is not the reference order of [`matmul_dense`].
pub fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>) -> Result<Matrix<T>> {
    if x.cols() != w.cols() {
        return Err(TealError::Shape(format!(
            "activation width {} does not match matrix {}x{}",
            x.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let (s, m, n) = (x.rows(), x.cols(), w.rows());
    let mut out = Matrix::zeros(s, n, Layout::RowMajor);
    let (rsa, csa) = x.strides();
    // Wᵀ viewed as m×n: element (k, j) = W(j, k).
    let (w_rs, w_cs) = w.strides();
    T::gemm(
        s,
        m,
        n,
        x.as_slice(),
        rsa,
        csa,
        w.as_slice(),
        w_cs,
        w_rs,
        out.as_mut_slice(),
    );
    Ok(out)
}
