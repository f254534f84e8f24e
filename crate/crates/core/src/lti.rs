//! Plant model `x(k+1) = A x(k) + B u(k)`, constraint sets and prediction
//! stacking over the horizon `N = n`.

use thiserror::Error;

use crate::matrix::{dot, Lu, Mat, MatrixError};

/// Relative pivot threshold for the controllability rank test.
pub const CONTROLLABILITY_TOL: f64 = 1e-10;

/// Slack tolerated by [`ConstraintSpec::check_membership`].
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LtiError {
    #[error("state matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("input matrix must be a single column with {expected} rows, got {rows}x{cols}")]
    BadInput {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("(A, B) is not controllable: controllability matrix is rank deficient at column {col}")]
    UncontrollablePair { col: usize },
    #[error("invalid constraint specification: {0}")]
    InvalidConstraint(String),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Controllable single-input plant.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: Mat,
    b: Mat,
    // A^p B for p = 0..n-1, shared by the controllability matrix and gamma.
    powers_b: Vec<Vec<f64>>,
}

impl LinearSystem {
    pub fn new(a: Mat, b: Mat) -> Result<Self, LtiError> {
        if !a.is_square() {
            return Err(LtiError::NotSquare {
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        let n = a.rows();
        if b.rows() != n || b.cols() != 1 {
            return Err(LtiError::BadInput {
                expected: n,
                rows: b.rows(),
                cols: b.cols(),
            });
        }
        let mut powers_b = Vec::with_capacity(n);
        let mut v = b.col(0);
        for _ in 0..n {
            let next = a.mul_vec(&v);
            powers_b.push(v);
            v = next;
        }
        let sys = Self { a, b, powers_b };
        match Lu::factor(&sys.controllability_matrix(), CONTROLLABILITY_TOL) {
            Ok(_) => Ok(sys),
            Err(MatrixError::SingularMatrix { col, .. }) => Err(LtiError::UncontrollablePair { col }),
            Err(e) => Err(e.into()),
        }
    }

    /// Convenience constructor from row-major `A` rows and the `B` column.
    pub fn from_parts(a_rows: &[Vec<f64>], b: &[f64]) -> Result<Self, LtiError> {
        Self::new(Mat::from_rows(a_rows)?, Mat::column(b)?)
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn b_vec(&self) -> Vec<f64> {
        self.b.col(0)
    }

    /// `S = [A^{n-1}B, A^{n-2}B, …, B]`; column `j` is `A^{n-1-j} B`.
    pub fn controllability_matrix(&self) -> Mat {
        let n = self.n();
        let mut s = Mat::zeros(n, n);
        for j in 0..n {
            let col = &self.powers_b[n - 1 - j];
            for (r, v) in col.iter().enumerate() {
                s[(r, j)] = *v;
            }
        }
        s
    }

    pub fn build_prediction(&self) -> PredictionStack {
        let n = self.n();
        let mut phi = Mat::zeros(n * n, n);
        let mut gamma = Mat::zeros(n * n, n);
        let mut a_pow = Mat::identity(n);
        for i in 1..=n {
            a_pow = a_pow.matmul(&self.a).expect("square");
            phi.set_block((i - 1) * n, 0, &a_pow);
            for j in 0..i {
                let col = &self.powers_b[i - 1 - j];
                for (r, v) in col.iter().enumerate() {
                    gamma[((i - 1) * n + r, j)] = *v;
                }
            }
        }
        PredictionStack {
            n,
            phi,
            s_row: self.controllability_matrix(),
            gamma,
            a_pow_n: a_pow,
        }
    }

    /// One step of the dynamics: `A x + B u`.
    pub fn step(&self, x: &[f64], u: f64) -> Vec<f64> {
        let mut next = self.a.mul_vec(x);
        for (xi, bi) in next.iter_mut().zip(self.b.data()) {
            *xi += bi * u;
        }
        next
    }

    /// Closed-loop matrix `A - B K` for a row gain `K`.
    pub fn closed_loop(&self, k: &[f64]) -> Mat {
        assert_eq!(k.len(), self.n());
        let bk = self.b.matmul(&Mat::row_vector(k).expect("finite gain")).expect("n x 1 times 1 x n");
        self.a.sub(&bk).expect("same shape")
    }
}

/// Stacked predictions over `N = n` steps: `X(k) = phi x(k) + gamma U(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionStack {
    pub n: usize,
    /// Vertical stack of `A¹ … Aⁿ`.
    pub phi: Mat,
    /// `S`, the last block row of `gamma`.
    pub s_row: Mat,
    pub gamma: Mat,
    /// `Aⁿ`.
    pub a_pow_n: Mat,
}

impl PredictionStack {
    /// Predicted states `x(1|k) … x(n|k)` for the control sequence `u`.
    pub fn predict(&self, x: &[f64], u: &[f64]) -> Vec<Vec<f64>> {
        let free = self.phi.mul_vec(x);
        let forced = self.gamma.mul_vec(u);
        free.iter()
            .zip(&forced)
            .map(|(a, b)| a + b)
            .collect::<Vec<_>>()
            .chunks(self.n)
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// `x(n|k) = Aⁿ x + S U`.
    pub fn terminal_state(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut t = self.a_pow_n.mul_vec(x);
        for (ti, si) in t.iter_mut().zip(self.s_row.mul_vec(u)) {
            *ti += si;
        }
        t
    }
}

/// One half-space row `normal · x ≤ bound` of the state polytope.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpace {
    pub normal: Vec<f64>,
    pub bound: f64,
}

/// State polytope `X`, input interval `U` and terminal box `X_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    n: usize,
    state: Vec<HalfSpace>,
    u_min: f64,
    u_max: f64,
    terminal_halfwidth: Vec<f64>,
}

impl ConstraintSpec {
    /// `state_h` may be empty, in which case `X = ℝⁿ`.
    pub fn new(
        n: usize,
        state_h: &[Vec<f64>],
        state_rhs: &[f64],
        u_min: f64,
        u_max: f64,
        terminal_halfwidth: &[f64],
    ) -> Result<Self, LtiError> {
        let bad = |msg: String| Err(LtiError::InvalidConstraint(msg));
        if state_h.len() != state_rhs.len() {
            return bad(format!(
                "state_h has {} rows but state_rhs has {} entries",
                state_h.len(),
                state_rhs.len()
            ));
        }
        let mut state = Vec::with_capacity(state_h.len());
        for (i, (row, &rhs)) in state_h.iter().zip(state_rhs).enumerate() {
            if row.len() != n {
                return bad(format!("state_h row {i} has {} entries, expected {n}", row.len()));
            }
            if row.iter().all(|v| *v == 0.0) {
                return bad(format!("state_h row {i} is zero"));
            }
            if !(rhs > 0.0) || !rhs.is_finite() || row.iter().any(|v| !v.is_finite()) {
                return bad(format!("state_rhs[{i}] = {rhs} must be finite and > 0 so X contains the origin"));
            }
            state.push(HalfSpace {
                normal: row.clone(),
                bound: rhs,
            });
        }
        if !(u_min < 0.0 && 0.0 < u_max) || !u_min.is_finite() || !u_max.is_finite() {
            return bad(format!("need u_min < 0 < u_max, got [{u_min}, {u_max}]"));
        }
        if terminal_halfwidth.len() != n {
            return bad(format!(
                "terminal halfwidth has {} entries, expected {n}",
                terminal_halfwidth.len()
            ));
        }
        if let Some(i) = terminal_halfwidth.iter().position(|e| !(*e > 0.0) || !e.is_finite()) {
            return bad(format!("terminal halfwidth[{i}] = {} must be positive", terminal_halfwidth[i]));
        }
        Ok(Self {
            n,
            state,
            u_min,
            u_max,
            terminal_halfwidth: terminal_halfwidth.to_vec(),
        })
    }

    /// Axis-aligned state box `|x_i| ≤ bound_i` as an H-polytope.
    pub fn state_box_rows(bounds: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let n = bounds.len();
        let mut rows = Vec::with_capacity(2 * n);
        let mut rhs = Vec::with_capacity(2 * n);
        for (i, &b) in bounds.iter().enumerate() {
            for sign in [1.0, -1.0] {
                let mut r = vec![0.0; n];
                r[i] = sign;
                rows.push(r);
                rhs.push(b);
            }
        }
        (rows, rhs)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn state_rows(&self) -> &[HalfSpace] {
        &self.state
    }

    pub fn u_min(&self) -> f64 {
        self.u_min
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn terminal_halfwidth(&self) -> &[f64] {
        &self.terminal_halfwidth
    }

    /// Same `X` and `U` with a different terminal box.
    pub fn with_terminal_halfwidth(&self, eps: &[f64]) -> Result<Self, LtiError> {
        let (h, rhs): (Vec<_>, Vec<_>) = self.state.iter().map(|s| (s.normal.clone(), s.bound)).unzip();
        Self::new(self.n, &h, &rhs, self.u_min, self.u_max, eps)
    }

    pub fn state_slack(&self, x: &[f64]) -> Vec<f64> {
        self.state.iter().map(|s| s.bound - dot(&s.normal, x)).collect()
    }

    pub fn input_slack(&self, u: f64) -> f64 {
        (self.u_max - u).min(u - self.u_min)
    }

    pub fn terminal_slack(&self, x: &[f64]) -> Vec<f64> {
        self.terminal_halfwidth.iter().zip(x).map(|(e, xi)| e - xi.abs()).collect()
    }

    pub fn contains_state(&self, x: &[f64]) -> bool {
        self.state_slack(x).iter().all(|s| *s >= -MEMBERSHIP_TOL)
    }

    pub fn contains_input(&self, u: f64) -> bool {
        self.input_slack(u) >= -MEMBERSHIP_TOL
    }

    pub fn in_terminal_set(&self, x: &[f64]) -> bool {
        self.terminal_slack(x).iter().all(|s| *s >= -MEMBERSHIP_TOL)
    }

    pub fn check_membership(&self, x: &[f64], u: f64) -> Membership {
        assert_eq!(x.len(), self.n, "state dimension mismatch");
        let state_slack = self.state_slack(x);
        let input_slack = self.input_slack(u);
        let terminal_slack = self.terminal_slack(x);
        Membership {
            in_state_set: state_slack.iter().all(|s| *s >= -MEMBERSHIP_TOL),
            in_input_set: input_slack >= -MEMBERSHIP_TOL,
            in_terminal_set: terminal_slack.iter().all(|s| *s >= -MEMBERSHIP_TOL),
            state_slack,
            input_slack,
            terminal_slack,
        }
    }
}

/// Per-row slack values; negative slack means violation.
#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    pub state_slack: Vec<f64>,
    pub input_slack: f64,
    pub terminal_slack: Vec<f64>,
    pub in_state_set: bool,
    pub in_input_set: bool,
    pub in_terminal_set: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn plant() -> LinearSystem {
        LinearSystem::from_parts(
            &[vec![1.1, 2.0, 0.0], vec![0.0, 0.95, 1.0], vec![0.0, 0.0, 1.2]],
            &[0.0, 0.079, 0.1],
        )
        .unwrap()
    }

    #[test]
    fn controllability_matrix_descending_powers() {
        let sys = LinearSystem::from_parts(&[vec![0.0, 1.0], vec![0.0, 0.0]], &[0.0, 1.0]).unwrap();
        assert_eq!(sys.controllability_matrix(), Mat::identity(2));

        let scalar = LinearSystem::from_parts(&[vec![2.0]], &[0.5]).unwrap();
        assert_eq!(scalar.controllability_matrix().data(), &[0.5]);

        let sys = plant();
        let s = sys.controllability_matrix();
        let a2b = sys.a().pow(2).unwrap().mul_vec(&sys.b_vec());
        for r in 0..3 {
            assert_abs_diff_eq!(s[(r, 0)], a2b[r], epsilon = 1e-15);
            assert_eq!(s[(r, 2)], sys.b_vec()[r]);
        }
    }

    #[test]
    fn rejects_uncontrollable_and_malformed() {
        let err = LinearSystem::from_parts(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, LtiError::UncontrollablePair { .. }));
        let err = LinearSystem::from_parts(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, LtiError::UncontrollablePair { .. }));
        let err = LinearSystem::new(Mat::zeros(2, 3), Mat::zeros(2, 1)).unwrap_err();
        assert!(matches!(err, LtiError::NotSquare { .. }));
        let err = LinearSystem::new(Mat::identity(2), Mat::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, LtiError::BadInput { .. }));
    }

    #[test]
    fn prediction_small_cases() {
        let scalar = LinearSystem::from_parts(&[vec![0.7]], &[2.0]).unwrap();
        let p = scalar.build_prediction();
        assert_eq!(p.phi.data(), &[0.7]);
        assert_eq!(p.gamma.data(), &[2.0]);

        let sys = LinearSystem::from_parts(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 1.0]);
        // I with a single input is not controllable; use a shear instead
        assert!(sys.is_err());
        let sys = LinearSystem::from_parts(&[vec![1.0, 1.0], vec![0.0, 1.0]], &[0.0, 1.0]).unwrap();
        let p = sys.build_prediction();
        assert_eq!(p.gamma.block(2, 0, 2, 2), p.s_row);
        assert_eq!(p.gamma.block(0, 0, 2, 2).col(1), vec![0.0, 0.0]);
    }

    #[test]
    fn gamma_last_block_row_is_s() {
        let sys = plant();
        let p = sys.build_prediction();
        assert_eq!(p.gamma.block(6, 0, 3, 3), sys.controllability_matrix());
        assert_eq!(p.s_row, sys.controllability_matrix());
    }

    #[test]
    fn step_examples() {
        let sys = plant();
        assert_eq!(sys.step(&[0.0; 3], 0.0), vec![0.0; 3]);
        assert_eq!(sys.step(&[1.0, 0.0, 0.0], 1.0), vec![1.1, 0.079, 0.1]);
        let shear = LinearSystem::from_parts(&[vec![1.0, 1.0], vec![0.0, 1.0]], &[0.0, 1.0]).unwrap();
        assert_eq!(shear.step(&[1.0, 1.0], 2.0), vec![2.0, 3.0]);
    }

    #[test]
    fn membership() {
        let (h, rhs) = ConstraintSpec::state_box_rows(&[10.0, 10.0, 10.0]);
        let spec = ConstraintSpec::new(3, &h, &rhs, -6.0, 6.0, &[0.1, 0.1, 0.1]).unwrap();
        let m = spec.check_membership(&[0.0; 3], 0.0);
        assert!(m.in_state_set && m.in_input_set && m.in_terminal_set);

        let m = spec.check_membership(&[0.0; 3], 7.0);
        assert!(!m.in_input_set);
        assert_eq!(m.input_slack, -1.0);

        let m = spec.check_membership(&[0.0; 3], 6.0);
        assert!(m.in_input_set);
        assert_eq!(m.input_slack, 0.0);

        let m = spec.check_membership(&[0.2, 0.0, 11.0], 0.0);
        assert!(!m.in_state_set && !m.in_terminal_set);
    }

    #[test]
    fn constraint_spec_invariants() {
        assert!(ConstraintSpec::new(2, &[], &[], 0.0, 1.0, &[1.0, 1.0]).is_err());
        assert!(ConstraintSpec::new(2, &[], &[], -1.0, 1.0, &[1.0, 0.0]).is_err());
        assert!(ConstraintSpec::new(2, &[vec![1.0, 0.0]], &[-1.0], -1.0, 1.0, &[1.0, 1.0]).is_err());
        assert!(ConstraintSpec::new(2, &[vec![0.0, 0.0]], &[1.0], -1.0, 1.0, &[1.0, 1.0]).is_err());
        assert!(ConstraintSpec::new(2, &[], &[], -1.0, 1.0, &[1.0]).is_err());
    }
}
