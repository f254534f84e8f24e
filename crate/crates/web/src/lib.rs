//! Browser bindings for the deadbeat MPC demo page (`www/index.html`).
//!
//! Every export takes the same JSON configuration and returns a JSON string:
//!
//! ```json
//! { "a": [[1.1, 2, 0], [0, 0.95, 1], [0, 0, 1.2]], "b": [0, 0.079, 0.1],
//!   "stabilizing_gain": [2.215, 15.0471, 14.6128], "r": 0.1,
//!   "u_bound": 6, "state_bound": 10, "terminal_shape": [1, 1, 1],
//!   "x0": [0, 0, 0.55], "steps": 20 }
//! ```
//!
//! The `*_json` functions are the native entry points used by the tests.

use deadbeat_mpc::cmpc::{bisect_terminal_scale, verify_terminal_set, ConstrainedMpc, TerminalCondition};
use deadbeat_mpc::deadbeat::{deadbeat_gain, DeadbeatGain, WeightSpec};
use deadbeat_mpc::export::{trajectory_csv, trajectory_svg};
use deadbeat_mpc::lti::{ConstraintSpec, LinearSystem};
use deadbeat_mpc::lyap::terminal_weight;
use deadbeat_mpc::simkit::{run_closed_loop, Trajectory};
use serde::Deserialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const MAX_DIM: usize = 6;
const MAX_STEPS: usize = 500;

fn default_r() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub stabilizing_gain: Vec<f64>,
    #[serde(default = "default_r")]
    pub r: f64,
    pub u_bound: f64,
    /// `|x_i| ≤ state_bound`; no state constraint when absent.
    pub state_bound: Option<f64>,
    pub terminal_shape: Option<Vec<f64>>,
    pub x0: Vec<f64>,
    pub steps: usize,
}

struct Setup {
    cfg: DemoConfig,
    sys: LinearSystem,
    gain: DeadbeatGain,
    weights: WeightSpec,
    /// Stage constraints; terminal halfwidth is the shape until sized.
    spec: ConstraintSpec,
    shape: Vec<f64>,
}

fn setup(config: &str) -> Result<Setup, String> {
    let cfg: DemoConfig = serde_json::from_str(config).map_err(|e| format!("config: {e}"))?;
    let n = cfg.a.len();
    if n == 0 || n > MAX_DIM {
        return Err(format!("a: the demo supports 1 to {MAX_DIM} states, got {n}"));
    }
    if cfg.steps == 0 || cfg.steps > MAX_STEPS {
        return Err(format!("steps: must be in 1..={MAX_STEPS}"));
    }
    for (field, len) in [("b", cfg.b.len()), ("stabilizing_gain", cfg.stabilizing_gain.len()), ("x0", cfg.x0.len())] {
        if len != n {
            return Err(format!("{field}: expected {n} entries, got {len}"));
        }
    }
    let sys = LinearSystem::from_parts(&cfg.a, &cfg.b).map_err(|e| format!("plant: {e}"))?;
    let gain = deadbeat_gain(&sys).map_err(|e| format!("plant: {e}"))?;
    let weights = WeightSpec::identity(n, cfg.r).map_err(|e| format!("r: {e}"))?;
    let shape = cfg.terminal_shape.clone().unwrap_or_else(|| vec![1.0; n]);
    let (h, rhs) = match cfg.state_bound {
        Some(bound) => ConstraintSpec::state_box_rows(&vec![bound; n]),
        None => (Vec::new(), Vec::new()),
    };
    let spec = ConstraintSpec::new(n, &h, &rhs, -cfg.u_bound, cfg.u_bound, &shape).map_err(|e| format!("constraints: {e}"))?;
    Ok(Setup {
        cfg,
        sys,
        gain,
        weights,
        spec,
        shape,
    })
}

fn rows(m: &deadbeat_mpc::matrix::Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn sized(s: &Setup) -> Result<(ConstraintSpec, deadbeat_mpc::cmpc::TerminalSizing), String> {
    let sizing = bisect_terminal_scale(&s.sys, &s.spec, &s.gain, &s.shape).map_err(|e| format!("terminal set: {e}"))?;
    let spec = s.spec.with_terminal_halfwidth(&sizing.halfwidth).map_err(|e| e.to_string())?;
    Ok((spec, sizing))
}

/// Deadbeat gain, terminal weight and the bisected terminal box.
pub fn design_json(config: &str) -> Result<String, String> {
    let s = setup(config)?;
    let lyap = terminal_weight(&s.sys, &s.cfg.stabilizing_gain, &s.weights).map_err(|e| format!("stabilizing_gain: {e}"))?;
    let (_, sizing) = sized(&s)?;
    Ok(json!({
        "k_db": s.gain.k_db,
        "s_n": s.gain.s_inv_first_row,
        "nilpotency_index": s.gain.nilpotency_index,
        "p": rows(&lyap.p),
        "lyapunov_residual": lyap.residual,
        "terminal": {
            "scale": sizing.scale,
            "halfwidth": sizing.halfwidth,
            "certified": sizing.report.certified(),
            "box_invariant": sizing.report.box_invariant(),
            "summary": sizing.report.summary(),
        },
    })
    .to_string())
}

fn summary(traj: &Trajectory, svg: String) -> Value {
    json!({
        "svg": svg,
        "settled_at": traj.settled_at,
        "max_abs_u": traj.max_abs_control(),
        "steps": traj.steps.len(),
        "constraint_violations": traj.constraint_violations,
        "failure": traj.failure.as_ref().map(|f| f.to_string()),
    })
}

/// Closed loops of the unconstrained deadbeat law and the constrained MPC
/// from the same `x0`.
pub fn simulate_json(config: &str) -> Result<String, String> {
    let s = setup(config)?;
    let (spec, _) = sized(&s)?;
    let bounds = Some((-s.cfg.u_bound, s.cfg.u_bound));
    let mut gain = s.gain.clone();
    let free = run_closed_loop(&s.sys, &mut gain, &s.cfg.x0, s.cfg.steps, Some(&spec));
    let free_svg = trajectory_svg(&free, "unconstrained deadbeat", bounds);
    let (mut mpc, _) = ConstrainedMpc::design(s.sys.clone(), spec.clone(), &s.cfg.stabilizing_gain, &s.weights)
        .map_err(|e| format!("constrained design: {e}"))?;
    let constrained = run_closed_loop(&s.sys, &mut mpc, &s.cfg.x0, s.cfg.steps, Some(&spec));
    let constrained_svg = trajectory_svg(&constrained, "constrained deadbeat MPC", bounds);
    Ok(json!({
        "unconstrained": summary(&free, free_svg),
        "constrained": summary(&constrained, constrained_svg),
        "constrained_csv": trajectory_csv(&constrained),
    })
    .to_string())
}

fn condition_name(c: &TerminalCondition) -> String {
    match c {
        TerminalCondition::InStateSet => "vertex in X".into(),
        TerminalCondition::ControlAdmissible => "-K_db v in U".into(),
        TerminalCondition::SuccessorInStateSet => "A_db v in X".into(),
        TerminalCondition::SuccessorInTerminalSet => "A_db v in X_f (not required)".into(),
        TerminalCondition::DeadbeatPathAdmissible { step } => format!("deadbeat step {step} admissible"),
    }
}

/// Bisected terminal scale plus the conditions that bind just above it.
pub fn terminal_set_json(config: &str) -> Result<String, String> {
    let s = setup(config)?;
    let (_, sizing) = sized(&s)?;
    let above: Vec<f64> = sizing.halfwidth.iter().map(|e| e * 1.01).collect();
    let trial = s.spec.with_terminal_halfwidth(&above).map_err(|e| e.to_string())?;
    let report = verify_terminal_set(&s.sys, &trial, &s.gain);
    let mut binding: Vec<String> = report
        .violations
        .iter()
        .filter(|v| v.condition != TerminalCondition::SuccessorInTerminalSet)
        .map(|v| condition_name(&v.condition))
        .collect();
    binding.sort();
    binding.dedup();
    Ok(json!({
        "scale": sizing.scale,
        "halfwidth": sizing.halfwidth,
        "summary": sizing.report.summary(),
        "box_invariant": sizing.report.box_invariant(),
        "binding_above_scale": binding,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn design(config: &str) -> Result<String, JsError> {
    design_json(config).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn simulate(config: &str) -> Result<String, JsError> {
    simulate_json(config).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn terminal_set(config: &str) -> Result<String, JsError> {
    terminal_set_json(config).map_err(|e| JsError::new(&e))
}
