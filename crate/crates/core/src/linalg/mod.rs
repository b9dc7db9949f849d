//! Dense row-major matrices and the thin SVD used by the adapter code.
//!
//! The production SVD comes from faer. nalgebra's SVD was dropped because
//! it returns wrong factors on some nearly rank-deficient inputs (relative
//! reconstruction errors of order one). A one-sided Jacobi SVD lives in
//! [`jacobi`] as an independent slow oracle. The symmetric eigensolver used
//! by CMA-ES is nalgebra's.

pub mod jacobi;

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("SVD did not converge")]
    NoConvergence,
}

/// Dense `f64` matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LinalgError::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
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

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`, i.e. every row of `self` dotted with every row of `rhs`.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != rhs.cols {
            return Err(LinalgError::Shape(format!(
                "cannot multiply {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs`.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        if self.rows != rhs.rows {
            return Err(LinalgError::Shape(format!(
                "cannot multiply ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let b = rhs.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product `self · x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        if self.shape() != rhs.shape() {
            return Err(LinalgError::Shape(format!(
                "cannot add {:?} and {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        if self.shape() != rhs.shape() {
            return Err(LinalgError::Shape(format!(
                "cannot subtract {:?} and {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|v| v * k).collect(),
            ..*self
        }
    }

    /// In-place `self += k · rhs`.
    pub fn axpy(&mut self, k: f64, rhs: &Matrix) {
        assert_eq!(self.shape(), rhs.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += k * b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖self − other‖_F / ‖other‖_F`, falling back to the absolute error
    /// when `other` is zero.
    pub fn relative_error(&self, other: &Matrix) -> f64 {
        let diff = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = other.frobenius_norm();
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &nalgebra::DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin SVD `M = U · diag(sigma) · Vt` of an `m×n` matrix, `k = min(m, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// `m×k`, orthonormal columns.
    pub u: Matrix,
    /// `k` values, non-negative, descending.
    pub sigma: Vec<f64>,
    /// `k×n`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdFactors {
    /// `U · diag(sigma) · Vt`.
    pub fn reconstruct(&self) -> Matrix {
        reconstruct(&self.u, &self.sigma, &self.vt)
    }
}

/// `U · diag(sigma) · Vt` for arbitrary (possibly negative) `sigma`.
pub fn reconstruct(u: &Matrix, sigma: &[f64], vt: &Matrix) -> Matrix {
    let (m, k) = u.shape();
    let n = vt.cols();
    debug_assert_eq!(k, sigma.len());
    debug_assert_eq!(k, vt.rows());
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let out_row = out.row_mut(i);
        for (j, &s) in sigma.iter().enumerate() {
            let coeff = u[(i, j)] * s;
            if coeff == 0.0 {
                continue;
            }
            for (o, &v) in out_row.iter_mut().zip(vt.row(j)) {
                *o += coeff * v;
            }
        }
    }
    out
}

/// Singular values closer than this are treated as tied when ordering.
pub const SINGULAR_TIE_TOL: f64 = 1e-12;

/// Thin SVD with canonical ordering and signs.
///
/// Singular values are sorted descending; values within
/// [`SINGULAR_TIE_TOL`] keep the order of their original column index. Each
/// column of `U` is flipped (together with the matching row of `Vt`) so that
/// its first nonzero element is non-negative.
pub fn svd(m: &Matrix) -> Result<SvdFactors, LinalgError> {
    if !m.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(LinalgError::Shape("empty matrix".into()));
    }
    let faer_m = faer::Mat::<f64>::from_fn(rows, cols, |r, c| m[(r, c)]);
    let decomposition = faer_m.thin_svd().map_err(|_| LinalgError::NoConvergence)?;
    let k = rows.min(cols);
    let (u_f, v_f) = (decomposition.U(), decomposition.V());
    let s_f = decomposition.S().column_vector();
    let u = Matrix::from_fn(rows, k, |r, c| u_f[(r, c)]);
    let vt = Matrix::from_fn(k, cols, |r, c| v_f[(c, r)]);
    let sigma: Vec<f64> = (0..k).map(|i| s_f[i]).collect();
    if sigma.iter().any(|s| !s.is_finite()) || !u.is_finite() || !vt.is_finite() {
        return Err(LinalgError::NoConvergence);
    }
    Ok(canonicalize(&u, &sigma, &vt))
}

/// Reorders and re-signs raw SVD factors into canonical form.
pub(crate) fn canonicalize(u: &Matrix, sigma: &[f64], vt: &Matrix) -> SvdFactors {
    let k = sigma.len();
    let mut order: Vec<usize> = Vec::with_capacity(k);
    // Insertion sort: the comparator is tolerance-based and therefore not a
    // total order, which rules out `sort_by`.
    for j in 0..k {
        let pos = order
            .iter()
            .position(|&i| sigma[j] > sigma[i] + SINGULAR_TIE_TOL)
            .unwrap_or(order.len());
        order.insert(pos, j);
    }

    let m = u.rows();
    let n = vt.cols();
    let mut out_u = Matrix::zeros(m, k);
    let mut out_vt = Matrix::zeros(k, n);
    let mut out_sigma = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let col = u.column(src);
        let flip = col
            .iter()
            .find(|v| v.abs() > SINGULAR_TIE_TOL)
            .is_some_and(|v| *v < 0.0);
        let sign = if flip { -1.0 } else { 1.0 };
        for (r, v) in col.iter().enumerate() {
            out_u[(r, dst)] = sign * v;
        }
        for (o, v) in out_vt.row_mut(dst).iter_mut().zip(vt.row(src)) {
            *o = sign * v;
        }
        out_sigma.push(sigma[src].max(0.0));
    }
    SvdFactors {
        u: out_u,
        sigma: out_sigma,
        vt: out_vt,
    }
}

/// Symmetric eigendecomposition `C = B · diag(values) · Bᵀ`.
pub(crate) fn symmetric_eigen(c: &Matrix) -> Option<(Matrix, Vec<f64>)> {
    if !c.is_finite() {
        return None;
    }
    let eig = nalgebra::linalg::SymmetricEigen::try_new(c.to_nalgebra(), f64::EPSILON, 100_000)?;
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    Some((Matrix::from_nalgebra(&eig.eigenvectors), values))
}
