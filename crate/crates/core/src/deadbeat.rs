//! Unconstrained deadbeat MPC.
//!
//! With the horizon fixed at `N = n`, the terminal-equality problem has a
//! single feasible control sequence `U = -S⁻¹ Aⁿ x`, and the terminal-cost
//! problem has the same sequence as its unique stationary point. The first
//! element gives the explicit gain `K_db = e₁ᵀ S⁻¹ Aⁿ`.

use thiserror::Error;

use crate::lti::LinearSystem;
use crate::matrix::{cholesky_solve, dot, Mat, MatrixError};
use crate::simkit::{ControlOutput, Controller, ControllerError};

/// Relative tolerance for declaring `(A - BK)ᵐ = 0`.
pub const NILPOTENCY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeadbeatError {
    #[error("closed loop A - B K_db is not nilpotent within tolerance")]
    NotNilpotent,
    #[error("weight specification: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nilpotency {
    Index(usize),
    NotNilpotent,
}

/// Explicit deadbeat gain and the pieces it is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct DeadbeatGain {
    /// `K_db`, so that `u = -K_db x`.
    pub k_db: Vec<f64>,
    /// First row of `S⁻¹` (written `S_nᵀ`).
    pub s_inv_first_row: Vec<f64>,
    pub nilpotency_index: usize,
}

impl DeadbeatGain {
    /// `u = -K_db x`.
    pub fn control(&self, x: &[f64]) -> f64 {
        -dot(&self.k_db, x)
    }
}

/// Computes `K_db = S_nᵀ Aⁿ` by solving `Sᵀ z = e₁`.
pub fn deadbeat_gain(sys: &LinearSystem) -> Result<DeadbeatGain, DeadbeatError> {
    let n = sys.n();
    let s = sys.controllability_matrix();
    let mut e1 = vec![0.0; n];
    e1[0] = 1.0;
    let s_n = s.transpose().lu()?.solve_vec(&e1);
    let a_n = sys.a().pow(n)?;
    let k_db = a_n.tr_mul_vec(&s_n);
    match nilpotency_index(sys, &k_db) {
        Nilpotency::Index(m) => Ok(DeadbeatGain {
            k_db,
            s_inv_first_row: s_n,
            nilpotency_index: m,
        }),
        Nilpotency::NotNilpotent => Err(DeadbeatError::NotNilpotent),
    }
}

/// Smallest `m ≤ n` with `‖(A-BK)ᵐ‖_max ≤ tol · max(1, ‖A-BK‖_max)ᵐ`.
pub fn nilpotency_index(sys: &LinearSystem, k: &[f64]) -> Nilpotency {
    matrix_nilpotency_index(&sys.closed_loop(k))
}

pub fn matrix_nilpotency_index(m: &Mat) -> Nilpotency {
    let scale = m.max_abs().max(1.0);
    let mut power = Mat::identity(m.rows());
    for i in 1..=m.rows() {
        power = power.matmul(m).expect("square");
        if power.max_abs() <= NILPOTENCY_TOL * scale.powi(i as i32) {
            return Nilpotency::Index(i);
        }
    }
    Nilpotency::NotNilpotent
}

/// Stage weights `Q`, `R` of the terminal-equality problem.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSpec {
    q: Mat,
    r: f64,
}

impl WeightSpec {
    pub fn new(q: Mat, r: f64) -> Result<Self, DeadbeatError> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(DeadbeatError::InvalidWeights(format!("R must be positive, got {r}")));
        }
        q.cholesky()
            .map_err(|e| DeadbeatError::InvalidWeights(format!("Q is not symmetric positive definite: {e}")))?;
        Ok(Self { q, r })
    }

    pub fn identity(n: usize, r: f64) -> Result<Self, DeadbeatError> {
        Self::new(Mat::identity(n), r)
    }

    pub fn q(&self) -> &Mat {
        &self.q
    }

    pub fn r(&self) -> f64 {
        self.r
    }
}

/// Optimal control sequence and the predicted states it produces.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSolution {
    /// `u(0|k) … u(n-1|k)`.
    pub controls: Vec<f64>,
    /// `x(1|k) … x(n|k)`.
    pub states: Vec<Vec<f64>>,
}

/// Terminal-equality deadbeat MPC.
///
/// The constraint `x(n|k) = 0` pins `U` to the single point `-S⁻¹ Aⁿ x`, so
/// `weights` never change the answer; they are accepted to keep the problem
/// statement complete.
pub fn solve_terminal_equality(
    sys: &LinearSystem,
    _weights: &WeightSpec,
    x: &[f64],
) -> Result<HorizonSolution, DeadbeatError> {
    let pred = sys.build_prediction();
    let rhs: Vec<f64> = pred.a_pow_n.mul_vec(x).iter().map(|v| -v).collect();
    let controls = pred.s_row.lu()?.solve_vec(&rhs);
    let mut states = pred.predict(x, &controls);
    if let Some(last) = states.last_mut() {
        last.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(HorizonSolution { controls, states })
}

/// Terminal-cost-only MPC, `min x(n|k)ᵀ P x(n|k)`, solved from its normal
/// equations `SᵀPS U = -SᵀP Aⁿ x`.
pub fn solve_terminal_cost_unconstrained(
    sys: &LinearSystem,
    p: &Mat,
    x: &[f64],
) -> Result<Vec<f64>, DeadbeatError> {
    p.cholesky()?;
    let pred = sys.build_prediction();
    let s = &pred.s_row;
    let ps = p.matmul(s)?;
    let hessian = s.transpose().matmul(&ps)?.symmetrized();
    let free = pred.a_pow_n.mul_vec(x);
    let g: Vec<f64> = ps.tr_mul_vec(&free).iter().map(|v| -v).collect();
    let l = hessian.cholesky()?;
    Ok(cholesky_solve(&l, &g))
}

/// `u = -K_db x`, the receding-horizon law of either unconstrained problem.
pub fn unconstrained_controller_step(gain: &DeadbeatGain, x: &[f64]) -> f64 {
    gain.control(x)
}

impl Controller for DeadbeatGain {
    fn control(&mut self, _k: usize, x: &[f64]) -> Result<ControlOutput, ControllerError> {
        Ok(ControlOutput::plain(DeadbeatGain::control(self, x)))
    }
}

/// Implicit terminal-equality MPC re-solved at every step.
#[derive(Debug, Clone)]
pub struct TerminalEqualityMpc {
    pub sys: LinearSystem,
    pub weights: WeightSpec,
}

impl Controller for TerminalEqualityMpc {
    fn control(&mut self, k: usize, x: &[f64]) -> Result<ControlOutput, ControllerError> {
        let sol = solve_terminal_equality(&self.sys, &self.weights, x)
            .map_err(|e| ControllerError::new(k, e.to_string()))?;
        Ok(ControlOutput::plain(sol.controls[0]))
    }
}

/// Implicit terminal-cost MPC re-solved at every step.
#[derive(Debug, Clone)]
pub struct TerminalCostMpc {
    pub sys: LinearSystem,
    pub p: Mat,
}

impl Controller for TerminalCostMpc {
    fn control(&mut self, k: usize, x: &[f64]) -> Result<ControlOutput, ControllerError> {
        let u = solve_terminal_cost_unconstrained(&self.sys, &self.p, x)
            .map_err(|e| ControllerError::new(k, e.to_string()))?;
        let terminal = self.sys.build_prediction().terminal_state(x, &u);
        let objective = dot(&terminal, &self.p.mul_vec(&terminal));
        Ok(ControlOutput {
            u: u[0],
            objective: Some(objective),
            terminal_state: Some(terminal),
            active_set_size: None,
        })
    }
}
