//! Constrained deadbeat MPC.
//!
//! The controller minimizes the terminal cost `x(n|k)ᵀ P x(n|k)` over the
//! `n`-step control sequence subject to stage constraints `x(i|k) ∈ X`,
//! `u(i-1|k) ∈ U` and the terminal box `x(n|k) ∈ X_f`.
//!
//! A box cannot in general be invariant under `A_db = A - B K_db` (for many
//! plants `|A_db|` has spectral radius above one), so the QP imposes the
//! terminal constraint on the box's invariant core `{x : A_dbʲ x ∈ X_f, j < n}`.
//! With that region the shifted sequence `[u*(1|k), …, -K_db x*(n|k)]` is
//! always feasible at `k+1`.
//!
//! Inside a certified terminal box the unconstrained deadbeat sequence is
//! admissible, so the QP optimum there coincides with `u = -K_db x` and the
//! state reaches the origin in at most `n` further steps.

use thiserror::Error;

use crate::deadbeat::{deadbeat_gain, DeadbeatError, DeadbeatGain, WeightSpec};
use crate::lti::{ConstraintSpec, LinearSystem, LtiError, PredictionStack};
use crate::lyap::{terminal_weight, LyapError, LyapunovResult};
use crate::matrix::{dot, norm_max, Mat, MatrixError};
use crate::qp::{qp_solve, QpError, QpProblem, QpStatus};
use crate::simkit::{ControlOutput, Controller, ControllerError};

/// Slack allowed on constraints when judging a feasible step.
pub const STEP_FEASIBILITY_TOL: f64 = 1e-8;
/// Tolerance of `u* = -K_db x + S_nᵀ x*(n|k)`.
pub const DECOMPOSITION_TOL: f64 = 1e-7;
/// Allowed increase of `J*` between consecutive steps.
pub const COST_DECREASE_TOL: f64 = 1e-7;
/// Smallest terminal box scale the bisection accepts.
pub const BISECTION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CmpcError {
    #[error("terminal set is not certified: {0}")]
    TerminalSetRejected(String),
    #[error("no terminal box scale above {BISECTION_FLOOR:e} passes the vertex certificate")]
    TerminalSetUnverifiable,
    #[error("QP iteration limit reached at state {state:?}; problem: {problem}")]
    IterationLimit { state: Vec<f64>, problem: String },
    #[error("steps are not consecutive: {0}")]
    NotConsecutive(String),
    #[error("terminal weight: {0}")]
    Weight(String),
    #[error(transparent)]
    Deadbeat(#[from] DeadbeatError),
    #[error(transparent)]
    Lyapunov(#[from] LyapError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Vertex conditions checked on the terminal box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalCondition {
    /// `v ∈ X`.
    InStateSet,
    /// `-K_db v ∈ U`.
    ControlAdmissible,
    /// `(A - B K_db) v ∈ X`.
    SuccessorInStateSet,
    /// `(A - B K_db) v ∈ X_f`. Reported only; see [`TerminalSetReport::certified`].
    SuccessorInTerminalSet,
    /// `A_dbʲ v ∈ X` and `-K_db A_dbʲ v ∈ U` for the remaining deadbeat steps.
    DeadbeatPathAdmissible { step: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VertexViolation {
    pub vertex: Vec<f64>,
    pub condition: TerminalCondition,
    /// Most negative slack.
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSetReport {
    pub halfwidth: Vec<f64>,
    pub vertices_checked: usize,
    pub violations: Vec<VertexViolation>,
}

impl TerminalSetReport {
    /// Every vertex admits the whole deadbeat trajectory: the box lies in `X`,
    /// and from any of its points `-K_db A_dbʲ x` stays in `U` with
    /// `A_dbʲ x ∈ X` for `j < n`. Box invariance under `A_db`
    /// ([`TerminalCondition::SuccessorInTerminalSet`]) is not required.
    pub fn certified(&self) -> bool {
        self.violations
            .iter()
            .all(|v| v.condition == TerminalCondition::SuccessorInTerminalSet)
    }

    /// `A_db X_f ⊂ X_f`.
    pub fn box_invariant(&self) -> bool {
        !self
            .violations
            .iter()
            .any(|v| v.condition == TerminalCondition::SuccessorInTerminalSet)
    }

    pub fn summary(&self) -> String {
        let count = |pred: &dyn Fn(&TerminalCondition) -> bool| {
            self.violations.iter().filter(|v| pred(&v.condition)).count()
        };
        format!(
            "{} vertices: state {} / control {} / successor-in-X {} / deadbeat-path {} violations; \
             box invariant under A_db: {}",
            self.vertices_checked,
            count(&|c| *c == TerminalCondition::InStateSet),
            count(&|c| *c == TerminalCondition::ControlAdmissible),
            count(&|c| *c == TerminalCondition::SuccessorInStateSet),
            count(&|c| matches!(c, TerminalCondition::DeadbeatPathAdmissible { .. })),
            self.box_invariant()
        )
    }
}

/// Checks every vertex of the box `X_f = {|x_i| ≤ ε_i}`.
pub fn verify_terminal_set(sys: &LinearSystem, spec: &ConstraintSpec, gain: &DeadbeatGain) -> TerminalSetReport {
    let n = sys.n();
    let eps = spec.terminal_halfwidth();
    let a_db = sys.closed_loop(&gain.k_db);
    let mut violations = Vec::new();
    let count = 1usize << n;
    let mut push = |vertex: &[f64], condition, slack: f64| {
        if slack < 0.0 {
            violations.push(VertexViolation {
                vertex: vertex.to_vec(),
                condition,
                slack,
            });
        }
    };
    let state_slack = |x: &[f64]| spec.state_slack(x).into_iter().fold(f64::INFINITY, f64::min);

    for mask in 0..count {
        let v: Vec<f64> = (0..n)
            .map(|i| if mask & (1 << i) != 0 { eps[i] } else { -eps[i] })
            .collect();
        push(&v, TerminalCondition::InStateSet, state_slack(&v));
        push(&v, TerminalCondition::ControlAdmissible, spec.input_slack(gain.control(&v)));
        let next = a_db.mul_vec(&v);
        push(&v, TerminalCondition::SuccessorInStateSet, state_slack(&next));
        let t_slack = spec.terminal_slack(&next).into_iter().fold(f64::INFINITY, f64::min);
        push(&v, TerminalCondition::SuccessorInTerminalSet, t_slack);

        let mut w = next;
        for step in 1..n {
            let slack = state_slack(&w).min(spec.input_slack(gain.control(&w)));
            push(&v, TerminalCondition::DeadbeatPathAdmissible { step }, slack);
            w = a_db.mul_vec(&w);
        }
    }
    TerminalSetReport {
        halfwidth: eps.to_vec(),
        vertices_checked: count,
        violations,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSizing {
    pub scale: f64,
    pub halfwidth: Vec<f64>,
    pub report: TerminalSetReport,
}

/// Largest `δ` (by bisection) for which `ε = δ · shape` passes
/// [`verify_terminal_set`].
pub fn bisect_terminal_scale(
    sys: &LinearSystem,
    spec: &ConstraintSpec,
    gain: &DeadbeatGain,
    shape: &[f64],
) -> Result<TerminalSizing, CmpcError> {
    let certify = |delta: f64| -> Result<TerminalSetReport, CmpcError> {
        let eps: Vec<f64> = shape.iter().map(|s| s * delta).collect();
        let trial = spec.with_terminal_halfwidth(&eps)?;
        Ok(verify_terminal_set(sys, &trial, gain))
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..40 {
        if certify(hi)?.certified() {
            lo = hi;
            hi *= 2.0;
        } else {
            break;
        }
    }
    if lo < hi {
        for _ in 0..200 {
            if hi - lo <= 1e-12 * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if certify(mid)?.certified() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    if lo < BISECTION_FLOOR {
        return Err(CmpcError::TerminalSetUnverifiable);
    }
    let report = certify(lo)?;
    Ok(TerminalSizing {
        scale: lo,
        halfwidth: shape.iter().map(|s| s * lo).collect(),
        report,
    })
}

/// Origin of each row of an assembled QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowTag {
    /// Half-space `row` of `X` applied to `x(stage|k)`, `stage ∈ 1..=n`.
    State { stage: usize, row: usize },
    /// `u(stage|k) ≤ u_max`, `stage ∈ 0..n`.
    InputUpper { stage: usize },
    /// `-u(stage|k) ≤ -u_min`.
    InputLower { stage: usize },
    /// `(A_dbʲ x(n|k))_coord ≤ ε_coord` with `j = power`.
    TerminalUpper { power: usize, coord: usize },
    TerminalLower { power: usize, coord: usize },
}

impl RowTag {
    /// Same constraint one stage earlier, as seen from the next time step.
    fn shifted(self) -> Option<RowTag> {
        match self {
            RowTag::State { stage, row } if stage > 1 => Some(RowTag::State { stage: stage - 1, row }),
            RowTag::InputUpper { stage } if stage > 0 => Some(RowTag::InputUpper { stage: stage - 1 }),
            RowTag::InputLower { stage } if stage > 0 => Some(RowTag::InputLower { stage: stage - 1 }),
            RowTag::TerminalUpper { .. } | RowTag::TerminalLower { .. } => Some(self),
            _ => None,
        }
    }
}

/// QP over `U(k)` plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcQp {
    pub problem: QpProblem,
    pub tags: Vec<RowTag>,
    /// `J(U) = qp objective + constant`.
    pub constant: f64,
    /// Rows that do not depend on `U` and are violated at this state.
    pub violated_constant_rows: Vec<RowTag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// State the step was computed for.
    pub state: Vec<f64>,
    pub u_applied: f64,
    pub u_sequence: Vec<f64>,
    /// Predicted `x*(n|k)`.
    pub terminal_state: Vec<f64>,
    /// `J*(k) = x*(n|k)ᵀ P x*(n|k)`.
    pub objective: f64,
    pub active_set: Vec<usize>,
    pub active_tags: Vec<RowTag>,
    pub feasible: bool,
    /// `|u_applied + K_db x - S_nᵀ x*(n|k)|`.
    pub decomposition_residual: f64,
    /// Phase-1 violation when infeasible.
    pub infeasibility: Option<f64>,
    pub iterations: usize,
}

/// Stage-by-stage verification of a control sequence from some state.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateCheck {
    pub inputs_admissible: bool,
    pub states_admissible: bool,
    /// Final state lies in the terminal region (see
    /// [`ConstrainedMpc::in_terminal_region`]).
    pub terminal_in_region: bool,
    /// Smallest slack over all checked constraints.
    pub worst_slack: f64,
    pub terminal_state: Vec<f64>,
}

impl CandidateCheck {
    pub fn feasible(&self) -> bool {
        self.inputs_admissible && self.states_admissible && self.terminal_in_region
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostDecrease {
    /// `J*(k+1) - J*(k)`.
    pub delta: f64,
    /// `J(k+1) - J*(k)` for the shifted candidate.
    pub candidate_bound: f64,
    pub candidate_feasible: bool,
    /// Whether the hard `J*(k+1) ≤ J*(k)` assertion applies.
    pub strict: bool,
    pub violated: bool,
}

/// Receding-horizon constrained deadbeat controller.
#[derive(Debug, Clone)]
pub struct ConstrainedMpc {
    sys: LinearSystem,
    spec: ConstraintSpec,
    p: Mat,
    gain: DeadbeatGain,
    pred: PredictionStack,
    a_db: Mat,
    terminal_report: TerminalSetReport,
    // gain the terminal weight was built from, when known
    weight_gain: Option<Vec<f64>>,
    warm: Option<Vec<RowTag>>,
    history: Vec<StepResult>,
}

impl ConstrainedMpc {
    /// Builds the controller from a given terminal weight `p`. Fails unless
    /// `p` is positive definite and the terminal box is certified.
    pub fn new(sys: LinearSystem, spec: ConstraintSpec, p: Mat) -> Result<Self, CmpcError> {
        if p.rows() != sys.n() || !p.is_square() {
            return Err(CmpcError::Weight(format!("P must be {0}x{0}", sys.n())));
        }
        p.cholesky().map_err(|e| CmpcError::Weight(e.to_string()))?;
        if spec.n() != sys.n() {
            return Err(CmpcError::Weight(format!(
                "constraint dimension {} does not match plant dimension {}",
                spec.n(),
                sys.n()
            )));
        }
        let gain = deadbeat_gain(&sys)?;
        let report = verify_terminal_set(&sys, &spec, &gain);
        if !report.certified() {
            return Err(CmpcError::TerminalSetRejected(report.summary()));
        }
        let pred = sys.build_prediction();
        let a_db = sys.closed_loop(&gain.k_db);
        Ok(Self {
            sys,
            spec,
            p,
            gain,
            pred,
            a_db,
            terminal_report: report,
            weight_gain: None,
            warm: None,
            history: Vec::new(),
        })
    }

    /// Solves the Lyapunov equation for `A - BK` with `Q + KᵀRK` and builds
    /// the controller with the resulting `P`.
    pub fn design(
        sys: LinearSystem,
        spec: ConstraintSpec,
        stabilizing_gain: &[f64],
        weights: &WeightSpec,
    ) -> Result<(Self, LyapunovResult), CmpcError> {
        if stabilizing_gain.len() != sys.n() {
            return Err(CmpcError::Weight(format!(
                "stabilizing gain has {} entries, expected {}",
                stabilizing_gain.len(),
                sys.n()
            )));
        }
        let lyap = terminal_weight(&sys, stabilizing_gain, weights)?;
        let mut mpc = Self::new(sys, spec, lyap.p.clone())?;
        mpc.weight_gain = Some(stabilizing_gain.to_vec());
        Ok((mpc, lyap))
    }

    pub fn system(&self) -> &LinearSystem {
        &self.sys
    }

    pub fn constraints(&self) -> &ConstraintSpec {
        &self.spec
    }

    pub fn terminal_weight(&self) -> &Mat {
        &self.p
    }

    pub fn gain(&self) -> &DeadbeatGain {
        &self.gain
    }

    pub fn prediction(&self) -> &PredictionStack {
        &self.pred
    }

    pub fn terminal_report(&self) -> &TerminalSetReport {
        &self.terminal_report
    }

    pub fn history(&self) -> &[StepResult] {
        &self.history
    }

    /// Drops warm-start state and the step history.
    pub fn reset(&mut self) {
        self.warm = None;
        self.history.clear();
    }

    /// True when `P` was built from `K = K_db`, the case in which the cost is
    /// guaranteed not to increase along the shifted candidate.
    pub fn weight_uses_deadbeat_gain(&self) -> bool {
        self.weight_gain.as_ref().is_some_and(|k| {
            let scale = norm_max(&self.gain.k_db).max(1.0);
            k.iter().zip(&self.gain.k_db).all(|(a, b)| (a - b).abs() <= 1e-9 * scale)
        })
    }

    pub fn assemble_qp(&self, x: &[f64]) -> Result<MpcQp, CmpcError> {
        let n = self.sys.n();
        let s = &self.pred.s_row;
        let ps = self.p.matmul(s)?;
        let hessian = s.transpose().matmul(&ps)?.scale(2.0).symmetrized();
        let free = self.pred.a_pow_n.mul_vec(x);
        let f: Vec<f64> = ps.tr_mul_vec(&free).iter().map(|v| 2.0 * v).collect();
        let constant = dot(&free, &self.p.mul_vec(&free));

        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        let mut tags = Vec::new();
        let mut violated = Vec::new();

        let phi_x = self.pred.phi.mul_vec(x);
        for stage in 1..=n {
            let gamma_i = self.pred.gamma.block((stage - 1) * n, 0, n, n);
            let free_i = &phi_x[(stage - 1) * n..stage * n];
            for (r, hs) in self.spec.state_rows().iter().enumerate() {
                let row = gamma_i.tr_mul_vec(&hs.normal);
                let bound = hs.bound - dot(&hs.normal, free_i);
                let tag = RowTag::State { stage, row: r };
                if norm_max(&row) <= 1e-14 * norm_max(&hs.normal) {
                    if bound < -STEP_FEASIBILITY_TOL {
                        violated.push(tag);
                    }
                    continue;
                }
                rows.push(row);
                rhs.push(bound);
                tags.push(tag);
            }
        }
        for stage in 0..n {
            let mut up = vec![0.0; n];
            up[stage] = 1.0;
            let lo: Vec<f64> = up.iter().map(|v| -v).collect();
            rows.push(up);
            rhs.push(self.spec.u_max());
            tags.push(RowTag::InputUpper { stage });
            rows.push(lo);
            rhs.push(-self.spec.u_min());
            tags.push(RowTag::InputLower { stage });
        }
        // terminal region: A_dbʲ x(n|k) ∈ X_f for j < n, the A_db-invariant
        // core of the box
        let eps = self.spec.terminal_halfwidth();
        let mut a_db_pow = Mat::identity(n);
        for power in 0..n {
            let map = a_db_pow.matmul(s)?;
            let offset = a_db_pow.mul_vec(&free);
            for coord in 0..n {
                let row = map.row(coord).to_vec();
                if norm_max(&row) <= 1e-14 * norm_max(a_db_pow.row(coord)).max(f64::MIN_POSITIVE) {
                    if offset[coord].abs() > eps[coord] + STEP_FEASIBILITY_TOL {
                        violated.push(RowTag::TerminalUpper { power, coord });
                    }
                    continue;
                }
                rows.push(row.clone());
                rhs.push(eps[coord] - offset[coord]);
                tags.push(RowTag::TerminalUpper { power, coord });
                rows.push(row.iter().map(|v| -v).collect());
                rhs.push(eps[coord] + offset[coord]);
                tags.push(RowTag::TerminalLower { power, coord });
            }
            a_db_pow = a_db_pow.matmul(&self.a_db)?;
        }
        let problem = QpProblem::new(hessian, f, rows, rhs)?;
        Ok(MpcQp {
            problem,
            tags,
            constant,
            violated_constant_rows: violated,
        })
    }

    /// One receding-horizon step. An infeasible QP yields `feasible = false`.
    pub fn controller_step(&mut self, x: &[f64]) -> Result<StepResult, CmpcError> {
        let n = self.sys.n();
        let qp = self.assemble_qp(x)?;
        let infeasible = |violation: f64| StepResult {
            state: x.to_vec(),
            u_applied: 0.0,
            u_sequence: vec![0.0; n],
            terminal_state: vec![0.0; n],
            objective: f64::NAN,
            active_set: Vec::new(),
            active_tags: Vec::new(),
            feasible: false,
            decomposition_residual: f64::NAN,
            infeasibility: Some(violation),
            iterations: 0,
        };
        if !qp.violated_constant_rows.is_empty() {
            log::info!("state-only rows violated at {x:?}: {:?}", qp.violated_constant_rows);
            self.warm = None;
            let r = infeasible(f64::INFINITY);
            self.history.push(r.clone());
            return Ok(r);
        }

        let warm: Option<Vec<usize>> = self.warm.as_ref().map(|tags| {
            tags.iter()
                .filter_map(|t| qp.tags.iter().position(|q| q == t))
                .collect()
        });
        let sol = qp_solve(&qp.problem, warm.as_deref())?;
        match sol.status {
            QpStatus::IterationLimit => {
                return Err(CmpcError::IterationLimit {
                    state: x.to_vec(),
                    problem: format!("{:?}", qp.problem),
                })
            }
            QpStatus::Infeasible => {
                log::info!("constrained MPC infeasible at {x:?} (phase-1 violation {:e})", sol.violation);
                self.warm = None;
                let r = infeasible(sol.violation);
                self.history.push(r.clone());
                return Ok(r);
            }
            QpStatus::Optimal => {}
        }

        let u = sol.z;
        let terminal = self.pred.terminal_state(x, &u);
        let objective = dot(&terminal, &self.p.mul_vec(&terminal));
        let u_applied = u[0];
        let decomposition =
            (u_applied - (self.gain.control(x) + dot(&self.gain.s_inv_first_row, &terminal))).abs();
        let active_tags: Vec<RowTag> = sol.active_set.iter().map(|&i| qp.tags[i]).collect();
        self.warm = Some(active_tags.iter().filter_map(|t| t.shifted()).collect());
        log::debug!(
            "step x={x:?} u={u_applied:.6} J*={objective:.3e} active={active_tags:?} iters={}",
            sol.iterations
        );
        let r = StepResult {
            state: x.to_vec(),
            u_applied,
            u_sequence: u,
            terminal_state: terminal,
            objective,
            active_set: sol.active_set,
            active_tags,
            feasible: true,
            decomposition_residual: decomposition,
            infeasibility: None,
            iterations: sol.iterations,
        };
        self.history.push(r.clone());
        Ok(r)
    }

    /// Smallest box slack of `A_dbʲ x` over `j < n`.
    pub fn terminal_region_slack(&self, x: &[f64]) -> f64 {
        let mut w = x.to_vec();
        let mut worst = f64::INFINITY;
        for _ in 0..self.sys.n() {
            worst = self.spec.terminal_slack(&w).into_iter().fold(worst, f64::min);
            w = self.a_db.mul_vec(&w);
        }
        worst
    }

    /// Membership in the terminal region `{x : A_dbʲ x ∈ X_f, j < n}`, the
    /// largest `A_db`-invariant subset of the box (exact because `A_dbⁿ = 0`).
    /// This region, not the bare box, is the QP's terminal constraint.
    pub fn in_terminal_region(&self, x: &[f64]) -> bool {
        self.terminal_region_slack(x) >= -STEP_FEASIBILITY_TOL
    }

    /// `[u*(1|k), …, u*(n-1|k), -K_db x*(n|k)]`.
    pub fn shifted_candidate(&self, prev: &StepResult) -> Vec<f64> {
        let mut c: Vec<f64> = prev.u_sequence[1..].to_vec();
        c.push(self.gain.control(&prev.terminal_state));
        c
    }

    /// Simulates `controls` from `x` and checks every stage constraint and the
    /// terminal region.
    pub fn verify_candidate(&self, x: &[f64], controls: &[f64]) -> CandidateCheck {
        let mut worst = f64::INFINITY;
        let mut inputs_ok = true;
        let mut states_ok = true;
        let mut state = x.to_vec();
        for &u in controls {
            let s = self.spec.input_slack(u);
            worst = worst.min(s);
            inputs_ok &= s >= -STEP_FEASIBILITY_TOL;
            state = self.sys.step(&state, u);
            for s in self.spec.state_slack(&state) {
                worst = worst.min(s);
                states_ok &= s >= -STEP_FEASIBILITY_TOL;
            }
        }
        let t = self.terminal_region_slack(&state);
        worst = worst.min(t);
        CandidateCheck {
            inputs_admissible: inputs_ok,
            states_admissible: states_ok,
            terminal_in_region: t >= -STEP_FEASIBILITY_TOL,
            worst_slack: worst,
            terminal_state: state,
        }
    }

    /// Compares `J*(k+1)` with `J*(k)` and with the shifted-candidate cost.
    pub fn cost_decrease_check(&self, prev: &StepResult, next: &StepResult) -> Result<CostDecrease, CmpcError> {
        if !prev.feasible || !next.feasible {
            return Err(CmpcError::NotConsecutive("both steps must be feasible".into()));
        }
        let expected = self.sys.step(&prev.state, prev.u_applied);
        let gap = expected
            .iter()
            .zip(&next.state)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if gap > 1e-9 * norm_max(&expected).max(1.0) {
            return Err(CmpcError::NotConsecutive(format!(
                "next state differs from A x + B u by {gap:e}"
            )));
        }
        let candidate = self.shifted_candidate(prev);
        let check = self.verify_candidate(&next.state, &candidate);
        let candidate_cost = dot(&check.terminal_state, &self.p.mul_vec(&check.terminal_state));
        let delta = next.objective - prev.objective;
        let strict = self.weight_uses_deadbeat_gain();
        Ok(CostDecrease {
            delta,
            candidate_bound: candidate_cost - prev.objective,
            candidate_feasible: check.feasible(),
            strict,
            violated: strict && delta > COST_DECREASE_TOL,
        })
    }

    /// `A_db`.
    pub fn deadbeat_closed_loop(&self) -> &Mat {
        &self.a_db
    }

    /// `Σⱼ A_db^{n-1-j} B S_nᵀ x*(n|t_j)` over the last `n` terminal states
    /// (oldest first). For `k ≥ n` this equals `x(k)` when the inputs are the
    /// terminal states of steps `k-n … k-1`.
    pub fn perturbed_state(&self, terminals: &[Vec<f64>]) -> Vec<f64> {
        let n = self.sys.n();
        assert_eq!(terminals.len(), n, "need exactly n terminal states");
        let b = self.sys.b_vec();
        let mut x = vec![0.0; n];
        for t in terminals {
            // Horner: x ← A_db x + B (S_nᵀ t)
            x = self.a_db.mul_vec(&x);
            let w = dot(&self.gain.s_inv_first_row, t);
            for (xi, bi) in x.iter_mut().zip(&b) {
                *xi += bi * w;
            }
        }
        x
    }
}

impl Controller for ConstrainedMpc {
    fn control(&mut self, k: usize, x: &[f64]) -> Result<ControlOutput, ControllerError> {
        let r = self.controller_step(x).map_err(|e| ControllerError::new(k, e.to_string()))?;
        if !r.feasible {
            return Err(ControllerError::new(
                k,
                format!(
                    "constrained QP infeasible (violation {:e})",
                    r.infeasibility.unwrap_or(f64::NAN)
                ),
            ));
        }
        Ok(ControlOutput {
            u: r.u_applied,
            objective: Some(r.objective),
            terminal_state: Some(r.terminal_state),
            active_set_size: Some(r.active_set.len()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const K_STAB: [f64; 3] = [2.2150, 15.0471, 14.6128];

    fn plant() -> LinearSystem {
        LinearSystem::from_parts(
            &[vec![1.1, 2.0, 0.0], vec![0.0, 0.95, 1.0], vec![0.0, 0.0, 1.2]],
            &[0.0, 0.079, 0.1],
        )
        .unwrap()
    }

    fn spec(u: f64, eps: f64) -> ConstraintSpec {
        let (h, rhs) = ConstraintSpec::state_box_rows(&[10.0; 3]);
        ConstraintSpec::new(3, &h, &rhs, -u, u, &[eps; 3]).unwrap()
    }

    fn controller(u: f64) -> ConstrainedMpc {
        let sys = plant();
        let gain = deadbeat_gain(&sys).unwrap();
        let sizing = bisect_terminal_scale(&sys, &spec(u, 1.0), &gain, &[1.0; 3]).unwrap();
        let spec = spec(u, 1.0).with_terminal_halfwidth(&sizing.halfwidth).unwrap();
        let w = WeightSpec::identity(3, 0.1).unwrap();
        ConstrainedMpc::design(sys, spec, &K_STAB, &w).unwrap().0
    }

    #[test]
    fn box_cannot_be_invariant_for_example_plant() {
        let sys = plant();
        let gain = deadbeat_gain(&sys).unwrap();
        for eps in [1e-6, 1e-3, 0.05] {
            let r = verify_terminal_set(&sys, &spec(6.0, eps), &gain);
            assert!(!r.box_invariant());
        }
    }

    #[test]
    fn bisection_threshold_separates_certified_boxes() {
        let sys = plant();
        let gain = deadbeat_gain(&sys).unwrap();
        let sizing = bisect_terminal_scale(&sys, &spec(6.0, 1.0), &gain, &[1.0; 3]).unwrap();
        assert!(sizing.report.certified());
        let above = verify_terminal_set(&sys, &spec(6.0, sizing.scale * 1.001), &gain);
        assert!(!above.certified());
        let below = verify_terminal_set(&sys, &spec(6.0, sizing.scale * 0.5), &gain);
        assert!(below.certified());
        // control admissibility alone bounds the scale by u_max / Σ|K_db|
        assert!(sizing.scale <= 6.0 / gain.k_db.iter().map(|k| k.abs()).sum::<f64>() + 1e-12);
    }

    #[test]
    fn oversized_box_violates_control_bound() {
        let sys = plant();
        let gain = deadbeat_gain(&sys).unwrap();
        let r = verify_terminal_set(&sys, &spec(6.0, 10.0), &gain);
        assert!(r
            .violations
            .iter()
            .any(|v| v.condition == TerminalCondition::ControlAdmissible));
        assert!(!r.certified());
        let w = WeightSpec::identity(3, 0.1).unwrap();
        assert!(matches!(
            ConstrainedMpc::design(plant(), spec(6.0, 10.0), &K_STAB, &w),
            Err(CmpcError::TerminalSetRejected(_))
        ));
    }

    #[test]
    fn origin_step_is_trivial() {
        let mut mpc = controller(6.0);
        let r = mpc.controller_step(&[0.0; 3]).unwrap();
        assert!(r.feasible);
        assert_eq!(r.u_applied, 0.0);
        assert_eq!(r.objective, 0.0);
        assert!(r.active_set.is_empty());
    }

    #[test]
    fn hessian_is_positive_definite() {
        let mpc = controller(6.0);
        let qp = mpc.assemble_qp(&[0.3, -0.1, 0.2]).unwrap();
        assert!(qp.problem.hessian().cholesky().is_ok());
        // stage-1 rows for x1 do not depend on U (B has a zero first entry)
        assert!(!qp.tags.contains(&RowTag::State { stage: 1, row: 0 }));
    }

    #[test]
    fn inside_terminal_box_acts_as_deadbeat() {
        let mut mpc = controller(6.0);
        let eps = mpc.constraints().terminal_halfwidth()[0];
        let x = [0.5 * eps, -0.3 * eps, 0.2 * eps];
        let r = mpc.controller_step(&x).unwrap();
        assert!(r.feasible);
        assert_abs_diff_eq!(r.u_applied, mpc.gain().control(&x), epsilon = 1e-7);
    }

    #[test]
    fn vacuous_constraints_recover_unconstrained_sequence() {
        let sys = plant();
        let spec = ConstraintSpec::new(3, &[], &[], -1e9, 1e9, &[1e-3; 3]).unwrap();
        let gain = deadbeat_gain(&sys).unwrap();
        let sizing = bisect_terminal_scale(&sys, &spec, &gain, &[1.0; 3]).unwrap();
        let spec = spec.with_terminal_halfwidth(&sizing.halfwidth).unwrap();
        let mut mpc = ConstrainedMpc::new(sys.clone(), spec, Mat::identity(3)).unwrap();
        let x = [2.0, -1.0, 3.0];
        let r = mpc.controller_step(&x).unwrap();
        let w = WeightSpec::identity(3, 0.1).unwrap();
        let reference = crate::deadbeat::solve_terminal_equality(&sys, &w, &x).unwrap();
        for (a, b) in r.u_sequence.iter().zip(&reference.controls) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-7);
        }
    }

    #[test]
    fn shifted_candidate_examples() {
        let mpc = controller(6.0);
        let prev = StepResult {
            state: vec![0.0; 3],
            u_applied: 0.0,
            u_sequence: vec![0.0; 3],
            terminal_state: vec![0.0; 3],
            objective: 0.0,
            active_set: vec![],
            active_tags: vec![],
            feasible: true,
            decomposition_residual: 0.0,
            infeasibility: None,
            iterations: 0,
        };
        assert_eq!(mpc.shifted_candidate(&prev), vec![0.0; 3]);
        let mut prev2 = prev.clone();
        prev2.u_sequence = vec![1.0, 2.0, 3.0];
        assert_eq!(mpc.shifted_candidate(&prev2), vec![2.0, 3.0, 0.0]);
    }

    #[test]
    fn saturating_state_stays_within_bounds() {
        let mut mpc = controller(6.0);
        let gain = mpc.gain().clone();
        // the unconstrained deadbeat input at this state exceeds the bound
        let x = [0.2, 0.15, 0.1];
        assert!(gain.control(&x).abs() > 6.0);
        let r = mpc.controller_step(&x).unwrap();
        assert!(r.feasible);
        assert!(r.u_applied.abs() <= 6.0 + 1e-8);
        assert!(r.decomposition_residual <= DECOMPOSITION_TOL);
    }

    #[test]
    fn cost_check_rejects_unrelated_steps() {
        let mut mpc = controller(6.0);
        let a = mpc.controller_step(&[0.01, 0.0, 0.0]).unwrap();
        let b = mpc.controller_step(&[0.0, 0.02, 0.0]).unwrap();
        assert!(matches!(mpc.cost_decrease_check(&a, &b), Err(CmpcError::NotConsecutive(_))));

        let zero = mpc.controller_step(&[0.0; 3]).unwrap();
        let next = mpc.controller_step(&[0.0; 3]).unwrap();
        let c = mpc.cost_decrease_check(&zero, &next).unwrap();
        assert_eq!(c.candidate_bound, 0.0);
        assert!(c.delta <= COST_DECREASE_TOL);
    }

    #[test]
    fn tight_bounds_make_generic_state_infeasible() {
        let mut mpc = controller(0.001);
        let r = mpc.controller_step(&[1.0, -1.0, 1.0]).unwrap();
        assert!(!r.feasible);
        assert!(r.infeasibility.unwrap() > 0.0);
    }
}
