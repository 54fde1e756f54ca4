//! Dense row-major matrices and the handful of numeric kernels the model
//! needs: matmul, elementwise maps, stable (masked) softmax, min-max
//! normalization.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, T::one());
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: r, cols: c, data })
    }

    pub fn scalar(v: T) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(self.mm(rhs))
    }

    /// Shape-unchecked product for internal callers that validated once.
    pub(crate) fn mm(&self, rhs: &Self) -> Self {
        debug_assert_eq!(self.cols, rhs.rows);
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = Self::zeros(n, m);
        for i in 0..n {
            let orow = &mut out.data[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let brow = &rhs.data[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map<F: Fn(T, T) -> T>(&self, rhs: &Self, f: F) -> Result<Self> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::Shape(format!(
                "elementwise {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(self.zip(rhs, f))
    }

    pub(crate) fn zip<F: Fn(T, T) -> T>(&self, rhs: &Self, f: F) -> Self {
        debug_assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_map(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_map(rhs, |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Self) -> Result<Self> {
        self.zip_map(rhs, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub(crate) fn add_assign(&mut self, rhs: &Self) {
        debug_assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax of one row. Entries equal to -inf are treated as masked: they map
/// to exactly 0 and are excluded from the max-subtraction and the sum.
/// All entries masked is a degenerate row and an error.
pub fn softmax_row<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    let mask: Vec<bool> = x.iter().map(|v| !(v.is_infinite() && *v < T::zero())).collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::Numeric("softmax of fully masked row".into()));
    }
    Ok(softmax_masked(x, &mask))
}

/// Masked softmax; reads only entries where `mask` is true, writes exactly 0
/// elsewhere. A fully masked row yields all zeros (callers use this for
/// no-history and padding rows).
pub(crate) fn softmax_masked<T: Scalar>(x: &[T], mask: &[bool]) -> Vec<T> {
    debug_assert_eq!(x.len(), mask.len());
    let mut mx = T::neg_infinity();
    for (v, &m) in x.iter().zip(mask) {
        if m && *v > mx {
            mx = *v;
        }
    }
    if mx == T::neg_infinity() {
        return vec![T::zero(); x.len()];
    }
    let mut out = vec![T::zero(); x.len()];
    let mut sum = T::zero();
    for i in 0..x.len() {
        if mask[i] {
            let e = (x[i] - mx).exp();
            out[i] = e;
            sum += e;
        }
    }
    for o in &mut out {
        *o /= sum;
    }
    // restore exact zeros at masked slots (0/sum is already 0, but be explicit)
    for (o, &m) in out.iter_mut().zip(mask) {
        if !m {
            *o = T::zero();
        }
    }
    out
}

/// Min-max normalize all entries to [0,1]. A constant matrix maps to all
/// zeros (the min==max convention).
pub fn minmax_normalize<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &v in m.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return Matrix::zeros(m.rows(), m.cols());
    }
    let span = hi - lo;
    m.map(|v| (v - lo) / span)
}
