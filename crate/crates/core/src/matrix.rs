//! Small dense row-major matrix kernel.
//!
//! The systems handled by this crate have a handful of states, so everything
//! here is a straightforward O(n³) routine over a flat `Vec<f64>`.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Relative pivot threshold used by [`Mat::lu_solve`].
pub const LU_PIVOT_TOL: f64 = 1e-12;

/// Relative asymmetry tolerated by [`Mat::cholesky`].
pub const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatrixError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("singular matrix: pivot {pivot} at column {col} is below threshold {threshold:e}")]
    SingularMatrix {
        col: usize,
        pivot: f64,
        threshold: f64,
    },
    #[error("matrix is not symmetric: |a[{row},{col}] - a[{col},{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },
    #[error("matrix is not positive definite: pivot {index} is {value:e}")]
    PositiveDefinitenessFailure { index: usize, value: f64 },
}

/// Dense real matrix, row-major.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for v in self.row(r) {
                write!(f, "{v:>14.6e} ")?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatrixError> {
        if rows == 0 || cols == 0 {
            return Err(MatrixError::DimensionMismatch(format!(
                "matrix must have positive dimensions, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(MatrixError::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatrixError::NonFinite {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatrixError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|row| row.len() != c) {
            return Err(MatrixError::DimensionMismatch(format!(
                "row {bad} has {} entries, expected {c}",
                rows[bad].len()
            )));
        }
        Self::new(r, c, rows.concat())
    }

    /// Column vector from a slice.
    pub fn column(v: &[f64]) -> Result<Self, MatrixError> {
        Self::new(v.len(), 1, v.to_vec())
    }

    /// Row vector from a slice.
    pub fn row_vector(v: &[f64]) -> Result<Self, MatrixError> {
        Self::new(1, v.len(), v.to_vec())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix");
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    /// Copies a `rows x cols` block starting at (`r0`, `c0`).
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Mat {
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            out.data[r * cols..(r + 1) * cols]
                .copy_from_slice(&self.data[(r0 + r) * self.cols + c0..(r0 + r) * self.cols + c0 + cols]);
        }
        out
    }

    /// Writes `src` into `self` with its top-left corner at (`r0`, `c0`).
    pub fn set_block(&mut self, r0: usize, c0: usize, src: &Mat) {
        for r in 0..src.rows {
            let dst = (r0 + r) * self.cols + c0;
            self.data[dst..dst + src.cols].copy_from_slice(src.row(r));
        }
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Mat) -> Result<Mat, MatrixError> {
        if self.cols != rhs.rows {
            return Err(MatrixError::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.data[k * rhs.cols + j];
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product. Panics on a length mismatch.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "mul_vec length mismatch");
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `selfᵀ · v` without forming the transpose.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "tr_mul_vec length mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            axpy(vr, self.row(r), &mut out);
        }
        out
    }

    pub fn add(&self, rhs: &Mat) -> Result<Mat, MatrixError> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Mat) -> Result<Mat, MatrixError> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Mat, f: impl Fn(f64, f64) -> f64) -> Result<Mat, MatrixError> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(MatrixError::DimensionMismatch(format!(
                "shape {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Mat { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        norm_max(&self.data)
    }

    /// `(self + selfᵀ) / 2`.
    pub fn symmetrized(&self) -> Mat {
        let t = self.transpose();
        let mut out = self.clone();
        for (o, v) in out.data.iter_mut().zip(&t.data) {
            *o = 0.5 * (*o + v);
        }
        out
    }

    /// Kronecker product `self ⊗ rhs`.
    pub fn kron(&self, rhs: &Mat) -> Mat {
        let mut out = Mat::zeros(self.rows * rhs.rows, self.cols * rhs.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let a = self[(i, j)];
                for p in 0..rhs.rows {
                    for q in 0..rhs.cols {
                        out[(i * rhs.rows + p, j * rhs.cols + q)] = a * rhs[(p, q)];
                    }
                }
            }
        }
        out
    }

    /// `selfᵏ` by repeated multiplication; `self⁰ = I`.
    pub fn pow(&self, k: usize) -> Result<Mat, MatrixError> {
        if !self.is_square() {
            return Err(MatrixError::DimensionMismatch(format!(
                "power of non-square {}x{} matrix",
                self.rows, self.cols
            )));
        }
        let mut out = Mat::identity(self.rows);
        for _ in 0..k {
            out = out.matmul(self)?;
        }
        Ok(out)
    }

    pub fn lu(&self) -> Result<Lu, MatrixError> {
        Lu::factor(self, LU_PIVOT_TOL)
    }

    /// Solves `self · x = b` with partially pivoted LU.
    pub fn lu_solve(&self, b: &Mat) -> Result<Mat, MatrixError> {
        if b.rows != self.rows {
            return Err(MatrixError::DimensionMismatch(format!(
                "rhs has {} rows, matrix has {}",
                b.rows, self.rows
            )));
        }
        self.lu()?.solve_mat(b)
    }

    /// Lower-triangular `L` with `L·Lᵀ = self` and positive diagonal.
    pub fn cholesky(&self) -> Result<Mat, MatrixError> {
        self.check_symmetric(SYMMETRY_TOL)?;
        let n = self.rows;
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) {
                return Err(MatrixError::PositiveDefinitenessFailure { index: j, value: d });
            }
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(l)
    }

    pub fn is_positive_definite(&self) -> bool {
        self.cholesky().is_ok()
    }

    fn check_symmetric(&self, tol: f64) -> Result<(), MatrixError> {
        if !self.is_square() {
            return Err(MatrixError::DimensionMismatch(format!(
                "expected square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let scale = tol * self.max_abs().max(1.0);
        for r in 0..self.rows {
            for c in r + 1..self.cols {
                let gap = (self[(r, c)] - self[(c, r)]).abs();
                if gap > scale {
                    return Err(MatrixError::NotSymmetric { row: r, col: c, gap });
                }
            }
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Partially pivoted LU factorization `P·A = L·U`, stored packed.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    /// Factors `a`, failing when a pivot falls below `rel_tol · ‖a‖_max`.
    pub fn factor(a: &Mat, rel_tol: f64) -> Result<Self, MatrixError> {
        if !a.is_square() {
            return Err(MatrixError::DimensionMismatch(format!(
                "LU of non-square {}x{} matrix",
                a.rows, a.cols
            )));
        }
        let n = a.rows;
        let threshold = rel_tol * a.max_abs();
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot <= threshold || pivot == 0.0 {
                return Err(MatrixError::SingularMatrix { col: k, pivot, threshold });
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let d = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / d;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for c in k + 1..n {
                        lu[i * n + c] -= f * lu[k * n + c];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s = dot(&self.lu[i * n..i * n + i], &x[..i]);
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s = dot(&self.lu[i * n + i + 1..(i + 1) * n], &x[i + 1..]);
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        x
    }

    pub fn solve_mat(&self, b: &Mat) -> Result<Mat, MatrixError> {
        if b.rows != self.n {
            return Err(MatrixError::DimensionMismatch(format!(
                "rhs has {} rows, factor has {}",
                b.rows, self.n
            )));
        }
        let mut out = Mat::zeros(b.rows, b.cols);
        for c in 0..b.cols {
            let x = self.solve_vec(&b.col(c));
            for (r, v) in x.into_iter().enumerate() {
                out[(r, c)] = v;
            }
        }
        Ok(out)
    }
}

/// Solves `L·Lᵀ·x = b` given the lower Cholesky factor `l`.
pub fn cholesky_solve(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    assert_eq!(b.len(), n);
    let mut y = b.to_vec();
    for i in 0..n {
        let s = dot(&l.row(i)[..i], &y[..i]);
        y[i] = (y[i] - s) / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// y += a * x
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm_max(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
