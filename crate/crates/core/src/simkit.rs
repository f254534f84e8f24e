//! Closed-loop simulation harness shared by every controller.

use std::fmt;

use crate::lti::{ConstraintSpec, LinearSystem};
use crate::matrix::norm_max;

/// Relative threshold used for `settled_at`.
pub const SETTLE_TOL: f64 = 1e-9;

/// What a controller returns for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub u: f64,
    pub objective: Option<f64>,
    pub terminal_state: Option<Vec<f64>>,
    pub active_set_size: Option<usize>,
}

impl ControlOutput {
    pub fn plain(u: f64) -> Self {
        Self {
            u,
            objective: None,
            terminal_state: None,
            active_set_size: None,
        }
    }
}

/// The controller could not produce an input at step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerError {
    pub k: usize,
    pub reason: String,
}

impl ControllerError {
    pub fn new(k: usize, reason: impl Into<String>) -> Self {
        Self { k, reason: reason.into() }
    }
}

impl fmt::Display for ControllerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "controller infeasible at step {}: {}", self.k, self.reason)
    }
}

impl std::error::Error for ControllerError {}

pub trait Controller {
    fn control(&mut self, k: usize, x: &[f64]) -> Result<ControlOutput, ControllerError>;
}

impl<F> Controller for F
where
    F: FnMut(usize, &[f64]) -> Result<ControlOutput, ControllerError>,
{
    fn control(&mut self, k: usize, x: &[f64]) -> Result<ControlOutput, ControllerError> {
        self(k, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub x: Vec<f64>,
    pub u: f64,
    pub objective: Option<f64>,
    pub terminal_state: Option<Vec<f64>>,
    pub active_set_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    /// State after the last recorded control was applied.
    pub final_state: Vec<f64>,
    /// First `k` from which every recorded state stays below the threshold.
    pub settled_at: Option<usize>,
    /// Steps whose state or input left `X` / `U`.
    pub constraint_violations: usize,
    pub failure: Option<ControllerError>,
}

impl Trajectory {
    /// `x(0) … x(N)`, including the final state.
    pub fn states(&self) -> Vec<&[f64]> {
        self.steps
            .iter()
            .map(|s| s.x.as_slice())
            .chain(std::iter::once(self.final_state.as_slice()))
            .collect()
    }

    pub fn controls(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.u).collect()
    }

    /// Smallest `k` with `‖x(j)‖_max ≤ threshold` for every recorded `j ≥ k`.
    pub fn settling_index(&self, threshold: f64) -> Option<usize> {
        settling_index(&self.states(), threshold)
    }

    pub fn max_abs_control(&self) -> f64 {
        norm_max(&self.controls())
    }
}

fn settling_index(states: &[&[f64]], threshold: f64) -> Option<usize> {
    let mut first = None;
    for (k, x) in states.iter().enumerate().rev() {
        if norm_max(x) <= threshold {
            first = Some(k);
        } else {
            break;
        }
    }
    first
}

/// Runs `horizon_steps` steps of `x(k+1) = A x(k) + B u(k)` with `u(k)` from
/// `controller`. A controller failure halts the run and is recorded in
/// `failure`.
pub fn run_closed_loop<C: Controller + ?Sized>(
    sys: &LinearSystem,
    controller: &mut C,
    x0: &[f64],
    horizon_steps: usize,
    constraints: Option<&ConstraintSpec>,
) -> Trajectory {
    assert!(horizon_steps >= 1, "horizon_steps must be at least 1");
    assert_eq!(x0.len(), sys.n(), "x0 dimension mismatch");
    let mut steps = Vec::with_capacity(horizon_steps);
    let mut x = x0.to_vec();
    let mut failure = None;
    let mut violations = 0;
    for k in 0..horizon_steps {
        let out = match controller.control(k, &x) {
            Ok(out) => out,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        if let Some(spec) = constraints {
            if !spec.contains_state(&x) || !spec.contains_input(out.u) {
                violations += 1;
            }
        }
        let next = sys.step(&x, out.u);
        steps.push(StepRecord {
            k,
            x: std::mem::replace(&mut x, next),
            u: out.u,
            objective: out.objective,
            terminal_state: out.terminal_state,
            active_set_size: out.active_set_size,
        });
    }
    if let Some(spec) = constraints {
        if failure.is_none() && !spec.contains_state(&x) {
            violations += 1;
        }
    }
    let mut traj = Trajectory {
        steps,
        final_state: x,
        settled_at: None,
        constraint_violations: violations,
        failure,
    };
    traj.settled_at = traj.settling_index(SETTLE_TOL * norm_max(x0).max(1.0));
    traj
}

/// Open-loop replay of a control sequence; returns `x(0) … x(N)`.
pub fn replay(sys: &LinearSystem, x0: &[f64], controls: &[f64]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(controls.len() + 1);
    out.push(x0.to_vec());
    for &u in controls {
        let next = sys.step(out.last().expect("non-empty"), u);
        out.push(next);
    }
    out
}
