//! Dense primal active-set solver for strictly convex QPs
//!
//! ```text
//!     minimize    ½ zᵀ H z + fᵀ z
//!     subject to  G z ≤ rhs
//! ```
//!
//! The iteration starts from the unconstrained minimizer when it is feasible,
//! from a warm-start working set when one is supplied and usable, and
//! otherwise from a point produced by an elastic phase-1 problem.

use thiserror::Error;

use crate::matrix::{cholesky_solve, dot, norm_max, Lu, Mat, MatrixError};

/// Feasibility tolerance for `G z ≤ rhs` at an optimal point.
pub const PRIMAL_TOL: f64 = 1e-8;
/// Phase-1 acceptance threshold on the scaled constraint violation.
pub const PHASE1_TOL: f64 = 1e-9;
/// Multipliers below `-DUAL_DROP_TOL` leave the working set.
const DUAL_DROP_TOL: f64 = 1e-10;
const STEP_TOL: f64 = 1e-12;
const PHASE1_REGULARIZATION: [f64; 3] = [1e-6, 1e-9, 1e-12];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("invalid QP: {0}")]
    Invalid(String),
    #[error("Hessian is not symmetric positive definite: {0}")]
    NotStrictlyConvex(MatrixError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Strictly convex QP with inequality constraints only.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    h: Mat,
    f: Vec<f64>,
    g: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    chol: Mat,
}

impl QpProblem {
    pub fn new(h: Mat, f: Vec<f64>, g: Vec<Vec<f64>>, rhs: Vec<f64>) -> Result<Self, QpError> {
        let m = h.rows();
        if f.len() != m {
            return Err(QpError::Invalid(format!("f has {} entries, H is {m}x{m}", f.len())));
        }
        if g.len() != rhs.len() {
            return Err(QpError::Invalid(format!("{} constraint rows but {} bounds", g.len(), rhs.len())));
        }
        for (i, row) in g.iter().enumerate() {
            if row.len() != m {
                return Err(QpError::Invalid(format!("constraint row {i} has {} entries, expected {m}", row.len())));
            }
            if row.iter().all(|v| *v == 0.0) {
                return Err(QpError::Invalid(format!("constraint row {i} is zero")));
            }
            if row.iter().any(|v| !v.is_finite()) || !rhs[i].is_finite() {
                return Err(QpError::Invalid(format!("constraint row {i} is not finite")));
            }
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(QpError::Invalid("f is not finite".into()));
        }
        let chol = h.cholesky().map_err(QpError::NotStrictlyConvex)?;
        Ok(Self { h, f, g, rhs, chol })
    }

    pub fn unconstrained(h: Mat, f: Vec<f64>) -> Result<Self, QpError> {
        Self::new(h, f, Vec::new(), Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.g.len()
    }

    pub fn hessian(&self) -> &Mat {
        &self.h
    }

    pub fn linear(&self) -> &[f64] {
        &self.f
    }

    pub fn constraint_rows(&self) -> &[Vec<f64>] {
        &self.g
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        0.5 * dot(z, &self.h.mul_vec(z)) + dot(&self.f, z)
    }

    /// Largest `G_i z - rhs_i` (negative when strictly feasible).
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        self.g
            .iter()
            .zip(&self.rhs)
            .map(|(row, b)| dot(row, z) - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn is_feasible(&self, z: &[f64], tol: f64) -> bool {
        self.g.iter().zip(&self.rhs).all(|(row, b)| dot(row, z) <= b + tol * b.abs().max(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: Vec<f64>,
    /// Working-set constraint indices at termination, ascending.
    pub active_set: Vec<usize>,
    /// One multiplier per constraint, zero outside the active set.
    pub multipliers: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub status: QpStatus,
    /// Largest scaled violation left by phase 1 on the Infeasible path;
    /// `max_violation` of `z` otherwise.
    pub violation: f64,
}

/// Outcome of the phase-1 feasibility search.
#[derive(Debug, Clone, PartialEq)]
pub enum Phase1 {
    Feasible(Vec<f64>),
    Infeasible { min_violation: f64 },
}

/// Finds `z` with `G z ≤ rhs + 1e-9` or reports infeasibility.
///
/// Rows are normalized and the largest violation is minimized through one
/// shared slack: `min ½ρ(‖z‖² + t²) + t` s.t. `Ĝ z - t ≤ r̂`, `t ≥ -1`, from
/// the feasible start `z = 0`, `t = max(0, max(-r̂))`. The regularization `ρ`
/// is tightened if the returned point still violates a row.
pub fn phase1_feasible(dim: usize, g: &[Vec<f64>], rhs: &[f64]) -> Result<Phase1, QpError> {
    if g.is_empty() {
        return Ok(Phase1::Feasible(vec![0.0; dim]));
    }
    let p = g.len();
    let norms: Vec<f64> = g.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|n| *n == 0.0) {
        return Err(QpError::Invalid(format!("constraint row {i} is zero")));
    }
    let g_hat: Vec<Vec<f64>> = g.iter().zip(&norms).map(|(r, n)| r.iter().map(|v| v / n).collect()).collect();
    let r_hat: Vec<f64> = rhs.iter().zip(&norms).map(|(b, n)| b / n).collect();
    let violation = |z: &[f64]| {
        g_hat
            .iter()
            .zip(&r_hat)
            .map(|(row, b)| dot(row, z) - b)
            .fold(f64::NEG_INFINITY, f64::max)
    };

    // variables (z, t): Ĝ z - t ≤ r̂, t ≥ -1
    let nv = dim + 1;
    let mut rows = Vec::with_capacity(p + 1);
    let mut bounds = Vec::with_capacity(p + 1);
    for (row, b) in g_hat.iter().zip(&r_hat) {
        let mut r = row.clone();
        r.push(-1.0);
        rows.push(r);
        bounds.push(*b);
    }
    let mut floor = vec![0.0; nv];
    floor[dim] = -1.0;
    rows.push(floor);
    bounds.push(1.0);
    let mut start = vec![0.0; nv];
    start[dim] = r_hat.iter().map(|b| -b).fold(0.0, f64::max);
    let mut f = vec![0.0; nv];
    f[dim] = 1.0;

    let mut best = f64::INFINITY;
    let mut best_z = vec![0.0; dim];
    for rho in PHASE1_REGULARIZATION {
        let h = Mat::identity(nv).scale(rho);
        let out = active_set(&h, &f, &rows, &bounds, start.clone(), Vec::new(), 50 * (nv + p + 1))?;
        let z = &out.z[..dim];
        let v = violation(z);
        if v <= PHASE1_TOL {
            return Ok(Phase1::Feasible(z.to_vec()));
        }
        if v < best {
            best = v;
            best_z = z.to_vec();
        }
        if !out.converged {
            break;
        }
    }
    log::debug!("phase 1 infeasible, best scaled violation {best:e} at {best_z:?}");
    Ok(Phase1::Infeasible { min_violation: best })
}

/// Solves the QP. `warm_start` is a candidate working set; it only changes
/// the starting point, never the optimum.
pub fn qp_solve(prob: &QpProblem, warm_start: Option<&[usize]>) -> Result<QpSolution, QpError> {
    let m = prob.dim();
    let p = prob.num_constraints();
    let limit = 50 * (m + p);
    let neg_f: Vec<f64> = prob.f.iter().map(|v| -v).collect();
    let z_free = cholesky_solve(&prob.chol, &neg_f);

    let finish = |z: Vec<f64>, w: Vec<usize>, lambda_w: Vec<f64>, iterations: usize, status: QpStatus| {
        let mut multipliers = vec![0.0; p];
        for (&i, &l) in w.iter().zip(&lambda_w) {
            multipliers[i] = l;
        }
        let mut active_set = w;
        active_set.sort_unstable();
        QpSolution {
            objective: prob.objective(&z),
            violation: prob.max_violation(&z),
            z,
            active_set,
            multipliers,
            iterations,
            status,
        }
    };

    if prob.is_feasible(&z_free, 0.0) {
        return Ok(finish(z_free, Vec::new(), Vec::new(), 0, QpStatus::Optimal));
    }

    let warm = warm_start.and_then(|w| warm_point(prob, w));
    let (z0, w0) = match warm {
        Some(start) => start,
        None => match phase1_feasible(m, &prob.g, &prob.rhs)? {
            Phase1::Feasible(z) => (z, Vec::new()),
            Phase1::Infeasible { min_violation } => {
                let mut sol = finish(vec![0.0; m], Vec::new(), Vec::new(), 0, QpStatus::Infeasible);
                sol.violation = min_violation;
                return Ok(sol);
            }
        },
    };

    let out = active_set(&prob.h, &prob.f, &prob.g, &prob.rhs, z0, w0, limit)?;
    let status = if out.converged {
        QpStatus::Optimal
    } else {
        QpStatus::IterationLimit
    };
    Ok(finish(out.z, out.working, out.lambda, out.iterations, status))
}

/// Equality-constrained minimizer on the warm working set, if it is feasible.
fn warm_point(prob: &QpProblem, warm: &[usize]) -> Option<(Vec<f64>, Vec<usize>)> {
    let mut candidates: Vec<usize> = warm.iter().copied().filter(|&i| i < prob.num_constraints()).collect();
    candidates.sort_unstable();
    candidates.dedup();
    if candidates.is_empty() {
        return None;
    }
    // keep a linearly independent subset, lowest indices first
    let mut working: Vec<usize> = Vec::new();
    for i in candidates {
        let mut trial = working.clone();
        trial.push(i);
        let rows: Vec<Vec<f64>> = trial.iter().map(|&j| prob.g[j].clone()).collect();
        if trial.len() <= prob.dim() && gram_is_regular(&rows) {
            working = trial;
        }
    }
    let m = prob.dim();
    let k = working.len();
    let mut kkt = Mat::zeros(m + k, m + k);
    kkt.set_block(0, 0, &prob.h);
    let mut rhs = vec![0.0; m + k];
    for (r, v) in rhs.iter_mut().zip(&prob.f) {
        *r = -v;
    }
    for (a, &i) in working.iter().enumerate() {
        for c in 0..m {
            kkt[(m + a, c)] = prob.g[i][c];
            kkt[(c, m + a)] = prob.g[i][c];
        }
        rhs[m + a] = prob.rhs[i];
    }
    let sol = Lu::factor(&kkt, 1e-14).ok()?.solve_vec(&rhs);
    let z = sol[..m].to_vec();
    prob.is_feasible(&z, 1e-12).then_some((z, working))
}

fn gram_is_regular(rows: &[Vec<f64>]) -> bool {
    let k = rows.len();
    let mut gram = Mat::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            gram[(i, j)] = dot(&rows[i], &rows[j]);
        }
    }
    Lu::factor(&gram, 1e-10).is_ok()
}

struct ActiveSetOutcome {
    z: Vec<f64>,
    working: Vec<usize>,
    lambda: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Primal active-set iteration from a feasible `z` with working set `w`.
///
/// Blocking ties go to the lowest constraint index; constraints with negative
/// multipliers are dropped lowest index first.
fn active_set(
    h: &Mat,
    f: &[f64],
    g: &[Vec<f64>],
    rhs: &[f64],
    mut z: Vec<f64>,
    mut w: Vec<usize>,
    max_iter: usize,
) -> Result<ActiveSetOutcome, MatrixError> {
    let m = f.len();
    let mut lambda = Vec::new();
    for it in 0..max_iter {
        let grad: Vec<f64> = h.mul_vec(&z).iter().zip(f).map(|(a, b)| a + b).collect();
        let k = w.len();
        let mut kkt = Mat::zeros(m + k, m + k);
        kkt.set_block(0, 0, h);
        for (a, &i) in w.iter().enumerate() {
            for c in 0..m {
                kkt[(m + a, c)] = g[i][c];
                kkt[(c, m + a)] = g[i][c];
            }
        }
        let mut b = vec![0.0; m + k];
        for (bi, gi) in b.iter_mut().zip(&grad) {
            *bi = -gi;
        }
        let sol = Lu::factor(&kkt, 1e-14)?.solve_vec(&b);
        let step = &sol[..m];
        lambda = sol[m..].to_vec();

        if norm_max(step) <= STEP_TOL * norm_max(&z).max(1.0) {
            let drop = w
                .iter()
                .zip(&lambda)
                .filter(|(_, l)| **l < -DUAL_DROP_TOL)
                .map(|(i, _)| *i)
                .min();
            match drop {
                None => {
                    return Ok(ActiveSetOutcome {
                        z,
                        working: w,
                        lambda,
                        iterations: it,
                        converged: true,
                    })
                }
                Some(i) => {
                    let pos = w.iter().position(|&j| j == i).expect("in working set");
                    w.remove(pos);
                    continue;
                }
            }
        }

        let step_norm = norm_max(step);
        let mut alpha = 1.0;
        let mut blocking = None;
        for (i, (row, bound)) in g.iter().zip(rhs).enumerate() {
            if w.contains(&i) {
                continue;
            }
            let gp = dot(row, step);
            if gp <= 1e-14 * norm_max(row) * step_norm {
                continue;
            }
            let slack = (bound - dot(row, &z)).max(0.0);
            let t = slack / gp;
            if t < alpha {
                alpha = t;
                blocking = Some(i);
            }
        }
        for (zi, pi) in z.iter_mut().zip(step) {
            *zi += alpha * pi;
        }
        if let Some(i) = blocking {
            w.push(i);
        }
    }
    Ok(ActiveSetOutcome {
        z,
        working: w,
        lambda,
        iterations: max_iter,
        converged: false,
    })
}

/// Residuals of the first-order optimality conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    /// `‖H z + f + Gᵀ λ‖_max`.
    pub stationarity: f64,
    pub min_multiplier: f64,
    /// `max |λ_i (G_i z - rhs_i)|`.
    pub complementarity: f64,
    pub primal_violation: f64,
}

impl KktReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.stationarity <= tol
            && self.min_multiplier >= -1e-8
            && self.complementarity <= tol
            && self.primal_violation <= PRIMAL_TOL
    }
}

pub fn kkt_report(prob: &QpProblem, sol: &QpSolution) -> KktReport {
    let mut r: Vec<f64> = prob.h.mul_vec(&sol.z).iter().zip(&prob.f).map(|(a, b)| a + b).collect();
    let mut complementarity: f64 = 0.0;
    for (i, (row, &l)) in prob.g.iter().zip(&sol.multipliers).enumerate() {
        if l != 0.0 {
            for (ri, gi) in r.iter_mut().zip(row) {
                *ri += l * gi;
            }
        }
        complementarity = complementarity.max((l * (dot(row, &sol.z) - prob.rhs[i])).abs());
    }
    KktReport {
        stationarity: norm_max(&r),
        min_multiplier: sol.multipliers.iter().copied().fold(0.0, f64::min),
        complementarity,
        primal_violation: prob.max_violation(&sol.z).max(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar(bounds: &[(f64, f64)]) -> QpProblem {
        let (g, rhs) = bounds.iter().map(|&(a, b)| (vec![a], b)).unzip();
        QpProblem::new(Mat::new(1, 1, vec![2.0]).unwrap(), vec![-2.0], g, rhs).unwrap()
    }

    #[test]
    fn unconstrained_minimum() {
        let sol = qp_solve(&scalar(&[]), None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.z[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.objective, -1.0, epsilon = 1e-15);
        assert!(sol.active_set.is_empty());
    }

    #[test]
    fn clipped_minimum() {
        let prob = scalar(&[(1.0, 0.5)]);
        let sol = qp_solve(&prob, None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.z[0], 0.5, epsilon = 1e-12);
        assert_eq!(sol.active_set, vec![0]);
        assert_abs_diff_eq!(sol.multipliers[0], 1.0, epsilon = 1e-12);
        assert!(kkt_report(&prob, &sol).passes(1e-7));
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let sol = qp_solve(&scalar(&[(1.0, 1.0), (-1.0, -2.0)]), None).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
        assert!(sol.violation > PHASE1_TOL);

        match phase1_feasible(1, &[vec![1.0], vec![-1.0]], &[1.0, -2.0]).unwrap() {
            Phase1::Infeasible { min_violation } => assert!(min_violation > 0.4),
            other => panic!("expected infeasible, got {other:?}"),
        }
        assert_eq!(phase1_feasible(2, &[], &[]).unwrap(), Phase1::Feasible(vec![0.0, 0.0]));
    }

    #[test]
    fn phase1_finds_point_in_thin_slab() {
        let g = vec![vec![1.0, 1.0], vec![-1.0, -1.0], vec![1.0, 0.0]];
        let rhs = vec![10.001, -10.0, -3.0];
        match phase1_feasible(2, &g, &rhs).unwrap() {
            Phase1::Feasible(z) => {
                for (row, b) in g.iter().zip(&rhs) {
                    assert!(dot(row, &z) <= b + 1e-9);
                }
            }
            other => panic!("expected feasible, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_problems() {
        let h = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            QpProblem::unconstrained(h, vec![0.0, 0.0]),
            Err(QpError::NotStrictlyConvex(_))
        ));
        assert!(QpProblem::new(Mat::identity(2), vec![0.0, 0.0], vec![vec![0.0, 0.0]], vec![1.0]).is_err());
        assert!(QpProblem::new(Mat::identity(2), vec![0.0], vec![], vec![]).is_err());
    }

    #[test]
    fn two_active_constraints() {
        // min (z0-2)² + (z1-2)² s.t. z0 + z1 ≤ 1, z0 - z1 ≤ 0.5
        let prob = QpProblem::new(
            Mat::identity(2).scale(2.0),
            vec![-4.0, -4.0],
            vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 0.0]],
            vec![1.0, 0.5, 5.0],
        )
        .unwrap();
        let sol = qp_solve(&prob, None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.z[0], 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.z[1], 0.5, epsilon = 1e-10);
        assert_eq!(sol.active_set, vec![0]);
        assert!(kkt_report(&prob, &sol).passes(1e-7));

        let warm = qp_solve(&prob, Some(&[0, 1])).unwrap();
        assert_abs_diff_eq!(warm.z[0], sol.z[0], epsilon = 1e-12);
        assert_abs_diff_eq!(warm.z[1], sol.z[1], epsilon = 1e-12);
        // out-of-range warm indices are ignored
        let warm = qp_solve(&prob, Some(&[7])).unwrap();
        assert_abs_diff_eq!(warm.z[0], 0.5, epsilon = 1e-10);
    }
}
