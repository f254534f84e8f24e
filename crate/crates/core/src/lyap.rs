//! Discrete Lyapunov equation `A_Kᵀ P A_K - P = -Q_eff`, solved through the
//! n²×n² Kronecker system, and the Schur-stability certificate built on it.

use thiserror::Error;

use crate::deadbeat::WeightSpec;
use crate::lti::LinearSystem;
use crate::matrix::{Lu, Mat, MatrixError, LU_PIVOT_TOL};

/// Residual gate relative to `‖P‖_max`.
pub const LYAPUNOV_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LyapError {
    #[error("closed loop is not Schur stable: {0}")]
    Unstable(String),
    #[error("right-hand side must be symmetric positive definite: {0}")]
    InvalidRhs(MatrixError),
    #[error("Lyapunov residual {residual:e} exceeds {limit:e}")]
    Residual { residual: f64, limit: f64 },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovResult {
    pub p: Mat,
    /// `‖A_Kᵀ P A_K - P + Q_eff‖_max`.
    pub residual: f64,
}

/// Ordering of the unknowns of `vec(P)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VecOrder {
    RowMajor,
    ColumnMajor,
}

pub fn solve_discrete_lyapunov(a_k: &Mat, q_eff: &Mat) -> Result<LyapunovResult, LyapError> {
    solve_discrete_lyapunov_ordered(a_k, q_eff, VecOrder::RowMajor)
}

pub fn solve_discrete_lyapunov_ordered(
    a_k: &Mat,
    q_eff: &Mat,
    order: VecOrder,
) -> Result<LyapunovResult, LyapError> {
    if !a_k.is_square() || q_eff.rows() != a_k.rows() || !q_eff.is_square() {
        return Err(MatrixError::DimensionMismatch(format!(
            "A_K is {}x{}, Q_eff is {}x{}",
            a_k.rows(),
            a_k.cols(),
            q_eff.rows(),
            q_eff.cols()
        ))
        .into());
    }
    q_eff.cholesky().map_err(LyapError::InvalidRhs)?;
    let n = a_k.rows();
    let idx = |i: usize, j: usize| match order {
        VecOrder::RowMajor => i * n + j,
        VecOrder::ColumnMajor => j * n + i,
    };

    let system = match order {
        VecOrder::RowMajor => {
            let at = a_k.transpose();
            Mat::identity(n * n).sub(&at.kron(&at))?
        }
        VecOrder::ColumnMajor => {
            // coefficient of P_kl in equation (i, j) is δ_ik δ_jl - A_ki A_lj
            let mut m = Mat::zeros(n * n, n * n);
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        for l in 0..n {
                            let delta = if i == k && j == l { 1.0 } else { 0.0 };
                            m[(idx(i, j), idx(k, l))] = delta - a_k[(k, i)] * a_k[(l, j)];
                        }
                    }
                }
            }
            m
        }
    };
    let mut rhs = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            rhs[idx(i, j)] = q_eff[(i, j)];
        }
    }
    let lu = Lu::factor(&system, LU_PIVOT_TOL).map_err(|e| LyapError::Unstable(e.to_string()))?;
    let v = lu.solve_vec(&rhs);
    let mut p = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            p[(i, j)] = v[idx(i, j)];
        }
    }
    let p = p.symmetrized();
    p.cholesky()
        .map_err(|e| LyapError::Unstable(format!("solution is not positive definite ({e})")))?;

    let residual = lyapunov_residual(a_k, &p, q_eff);
    let limit = LYAPUNOV_RESIDUAL_TOL * p.max_abs().max(1.0);
    if residual > limit {
        return Err(LyapError::Residual { residual, limit });
    }
    Ok(LyapunovResult { p, residual })
}

/// `‖A_Kᵀ P A_K - P + Q_eff‖_max`.
pub fn lyapunov_residual(a_k: &Mat, p: &Mat, q_eff: &Mat) -> f64 {
    let apa = a_k.transpose().matmul(p).and_then(|m| m.matmul(a_k)).expect("square");
    apa.sub(p).and_then(|m| m.add(q_eff)).expect("same shape").max_abs()
}

/// True iff the Lyapunov equation with `Q_eff = I` has a positive definite
/// solution.
pub fn is_schur_stable(a_k: &Mat) -> bool {
    a_k.is_square() && solve_discrete_lyapunov(a_k, &Mat::identity(a_k.rows())).is_ok()
}

/// Terminal weight from a stabilizing gain: `A_K = A - BK`,
/// `Q_eff = Q + Kᵀ R K`.
pub fn terminal_weight(sys: &LinearSystem, k: &[f64], weights: &WeightSpec) -> Result<LyapunovResult, LyapError> {
    let a_k = sys.closed_loop(k);
    let kt_k = Mat::column(k)?.matmul(&Mat::row_vector(k)?)?;
    let q_eff = weights.q().add(&kt_k.scale(weights.r()))?;
    solve_discrete_lyapunov(&a_k, &q_eff)
}
