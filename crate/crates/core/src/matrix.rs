//! Dense row-major matrices and order-3 tensors.
//!
//! `DenseMatrix` is the workhorse container for weights, adapters, targets,
//! and sensing operators. Storage is row-major `f64`; arithmetic uses fixed
//! loop orders so results are bit-reproducible across runs. Shape agreement
//! between operands is a programmer contract and enforced with assertions;
//! user-facing shape validation happens at module boundaries.
//!
//! `Tensor3` stores an (d1, d2, d3) block with mode-1 fastest (entry (i,j,k)
//! lives at `i + d1*(j + d2*k)`), matching the layer-stack convention where
//! `slice(k)` is the k-th d1 x d2 matrix.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds from a row-major entry sequence, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "entry count {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged row lengths".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    /// Diagonal matrix from the given entries.
    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows);
        for i in 0..self.rows {
            self[(i, j)] = v[i];
        }
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * rhs^T`.
    pub fn matmul_nt(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, rhs.cols, "matmul_nt inner dimension");
        DenseMatrix::from_fn(self.rows, rhs.rows, |i, j| {
            dot(self.row(i), rhs.row(j))
        })
    }

    /// `self^T * rhs`.
    pub fn matmul_tn(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, rhs.rows, "matmul_tn inner dimension");
        let mut out = DenseMatrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self[(k, i)];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Gram matrix `self^T * self`.
    pub fn gram(&self) -> DenseMatrix {
        self.matmul_tn(self)
    }

    pub fn add(&self, rhs: &DenseMatrix) -> DenseMatrix {
        self.zip(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> DenseMatrix {
        self.zip(rhs, |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &DenseMatrix) -> DenseMatrix {
        self.zip(rhs, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> DenseMatrix {
        self.map(|v| c * v)
    }

    /// `self += c * rhs` in place.
    pub fn axpy(&mut self, c: f64, rhs: &DenseMatrix) {
        assert_eq!(self.dims(), rhs.dims(), "axpy shape");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += c * b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, rhs: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
        assert_eq!(self.dims(), rhs.dims(), "elementwise shape");
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm_sq().sqrt()
    }

    /// Frobenius inner product `<self, rhs> = sum_ij self_ij rhs_ij`.
    pub fn frob_inner(&self, rhs: &DenseMatrix) -> f64 {
        assert_eq!(self.dims(), rhs.dims(), "frob_inner shape");
        dot(&self.data, &rhs.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Euclidean norms of each column.
    pub fn col_norms(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (j, acc) in s.iter_mut().enumerate() {
                let v = self[(i, j)];
                *acc += v * v;
            }
        }
        s.into_iter().map(f64::sqrt).collect()
    }

    /// Columns `lo..hi` as a new matrix.
    pub fn col_range(&self, lo: usize, hi: usize) -> DenseMatrix {
        assert!(lo <= hi && hi <= self.cols);
        DenseMatrix::from_fn(self.rows, hi - lo, |i, j| self[(i, lo + j)])
    }

    /// Kronecker product: block (i,j) of the output is `self[i,j] * rhs`.
    pub fn kron(&self, rhs: &DenseMatrix) -> DenseMatrix {
        let (d1, d2) = self.dims();
        let (d3, d4) = rhs.dims();
        DenseMatrix::from_fn(d1 * d3, d2 * d4, |i, j| {
            self[(i / d3, j / d4)] * rhs[(i % d3, j % d4)]
        })
    }

    /// Row-wise Khatri-Rao product: row i of the output is
    /// `self.row(i) (x) rhs.row(i)`.
    pub fn khatri_rao_rows(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, rhs.rows, "khatri_rao_rows row count");
        let (p, q) = (self.cols, rhs.cols);
        DenseMatrix::from_fn(self.rows, p * q, |i, j| {
            self[(i, j / q)] * rhs[(i, j % q)]
        })
    }

    pub fn to_na(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_na(m: &nalgebra::DMatrix<f64>) -> DenseMatrix {
        DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Order-3 tensor with mode-1 fastest storage: entry (i, j, k) at
/// `i + d1*(j + d2*k)`. `slice(k)` extracts the k-th d1 x d2 layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    d1: usize,
    d2: usize,
    d3: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d1: usize, d2: usize, d3: usize) -> Self {
        Self { d1, d2, d3, data: vec![0.0; d1 * d2 * d3] }
    }

    pub fn from_vec(d1: usize, d2: usize, d3: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != d1 * d2 * d3 {
            return Err(Error::Shape(format!(
                "entry count {} does not match {}x{}x{}",
                data.len(),
                d1,
                d2,
                d3
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("tensor entries must be finite".into()));
        }
        Ok(Self { d1, d2, d3, data })
    }

    pub fn from_fn(d1: usize, d2: usize, d3: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(d1, d2, d3);
        for k in 0..d3 {
            for j in 0..d2 {
                for i in 0..d1 {
                    t[(i, j, k)] = f(i, j, k);
                }
            }
        }
        t
    }

    pub fn from_slices(slices: &[DenseMatrix]) -> Result<Self> {
        let d3 = slices.len();
        if d3 == 0 {
            return Err(Error::Shape("tensor needs at least one slice".into()));
        }
        let (d1, d2) = slices[0].dims();
        if slices.iter().any(|s| s.dims() != (d1, d2)) {
            return Err(Error::Shape("tensor slices must share dimensions".into()));
        }
        Ok(Self::from_fn(d1, d2, d3, |i, j, k| slices[k][(i, j)]))
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d1, self.d2, self.d3)
    }

    pub fn layers(&self) -> usize {
        self.d3
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn slice(&self, k: usize) -> DenseMatrix {
        assert!(k < self.d3);
        DenseMatrix::from_fn(self.d1, self.d2, |i, j| self[(i, j, k)])
    }

    pub fn sub(&self, rhs: &Tensor3) -> Tensor3 {
        assert_eq!(self.dims(), rhs.dims(), "tensor elementwise shape");
        Tensor3 {
            d1: self.d1,
            d2: self.d2,
            d3: self.d3,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm_sq().sqrt()
    }
}

impl std::ops::Index<(usize, usize, usize)> for Tensor3 {
    type Output = f64;
    fn index(&self, (i, j, k): (usize, usize, usize)) -> &f64 {
        debug_assert!(i < self.d1 && j < self.d2 && k < self.d3);
        &self.data[i + self.d1 * (j + self.d2 * k)]
    }
}

impl std::ops::IndexMut<(usize, usize, usize)> for Tensor3 {
    fn index_mut(&mut self, (i, j, k): (usize, usize, usize)) -> &mut f64 {
        debug_assert!(i < self.d1 && j < self.d2 && k < self.d3);
        &mut self.data[i + self.d1 * (j + self.d2 * k)]
    }
}
