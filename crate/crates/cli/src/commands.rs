use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use deadbeat_mpc::cmpc::{bisect_terminal_scale, verify_terminal_set, ConstrainedMpc, TerminalSetReport, DECOMPOSITION_TOL};
use deadbeat_mpc::deadbeat::{deadbeat_gain, DeadbeatGain, TerminalCostMpc, TerminalEqualityMpc};
use deadbeat_mpc::export::{trajectory_csv, trajectory_svg};
use deadbeat_mpc::lti::ConstraintSpec;
use deadbeat_mpc::lyap::{terminal_weight, LyapError, LyapunovResult, LYAPUNOV_RESIDUAL_TOL};
use deadbeat_mpc::matrix::{dot, norm_max, Mat};
use deadbeat_mpc::simkit::{run_closed_loop, Controller, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::scenario::{ControllerKind, Scenario, TerminalChoice};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Infeasible(String),
    PropertyFailure(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Io(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::PropertyFailure(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid scenario: {m}"),
            CliError::Infeasible(m) => write!(f, "infeasible: {m}"),
            CliError::PropertyFailure(m) => write!(f, "property failure: {m}"),
            CliError::Io(m) => write!(f, "{m}"),
        }
    }
}

fn validation(e: impl ToString) -> CliError {
    CliError::Validation(e.to_string())
}

#[derive(Debug, Clone)]
pub struct TerminalDesign {
    pub halfwidth: Vec<f64>,
    /// Bisected scale of `terminal_shape`, when auto-sized.
    pub scale: Option<f64>,
    pub report: TerminalSetReport,
}

#[derive(Debug, Clone)]
pub struct Design {
    pub gain: DeadbeatGain,
    /// Terminal weight used by the terminal-cost or constrained controller.
    pub p: Option<Mat>,
    pub lyapunov: Option<LyapunovResult>,
    pub terminal: Option<TerminalDesign>,
    pub mpc: Option<ConstrainedMpc>,
    /// Stage constraints with the final terminal box.
    pub constraints: Option<ConstraintSpec>,
}

fn lyapunov_for(sc: &Scenario, k: &[f64]) -> Result<LyapunovResult, CliError> {
    terminal_weight(&sc.sys, k, &sc.weights).map_err(|e| match e {
        LyapError::Unstable(m) => {
            CliError::Validation(format!("controller.stabilizing_gain: A - BK is not Schur stable ({m})"))
        }
        other => CliError::Validation(format!("controller.stabilizing_gain: {other}")),
    })
}

pub fn design(sc: &Scenario) -> Result<Design, CliError> {
    let gain = deadbeat_gain(&sc.sys).map_err(|e| CliError::Validation(format!("plant: {e}")))?;
    let lyapunov = match (&sc.stabilizing_gain, sc.kind) {
        (Some(k), ControllerKind::Constrained | ControllerKind::UnconstrainedTerminalCost) => {
            Some(lyapunov_for(sc, k)?)
        }
        _ => None,
    };
    let p = match sc.kind {
        ControllerKind::UnconstrainedEquality => None,
        ControllerKind::UnconstrainedTerminalCost => Some(
            sc.terminal_weight
                .clone()
                .or_else(|| lyapunov.as_ref().map(|l| l.p.clone()))
                .unwrap_or_else(|| Mat::identity(sc.sys.n())),
        ),
        ControllerKind::Constrained => lyapunov.as_ref().map(|l| l.p.clone()),
    };
    if let Some(p) = &p {
        if !p.is_positive_definite() {
            return Err(validation("controller.terminal_weight: P is not symmetric positive definite"));
        }
    }

    let mut terminal = None;
    let mut constraints = None;
    if let Some(c) = &sc.constraints {
        let td = match &c.terminal {
            TerminalChoice::Fixed(eps) => TerminalDesign {
                halfwidth: eps.clone(),
                scale: None,
                report: verify_terminal_set(&sc.sys, &c.spec, &gain),
            },
            TerminalChoice::AutoBisect { shape } => {
                let sizing = bisect_terminal_scale(&sc.sys, &c.spec, &gain, shape)
                    .map_err(|e| CliError::Validation(format!("constraints.terminal: {e}")))?;
                TerminalDesign {
                    halfwidth: sizing.halfwidth,
                    scale: Some(sizing.scale),
                    report: sizing.report,
                }
            }
        };
        constraints = Some(c.spec.with_terminal_halfwidth(&td.halfwidth).map_err(validation)?);
        terminal = Some(td);
    }

    let mpc = match (sc.kind, &sc.stabilizing_gain, &constraints) {
        (ControllerKind::Constrained, Some(k), Some(spec)) => Some(
            ConstrainedMpc::design(sc.sys.clone(), spec.clone(), k, &sc.weights)
                .map_err(|e| CliError::Validation(format!("constraints.terminal: {e}")))?
                .0,
        ),
        _ => None,
    };
    Ok(Design {
        gain,
        p,
        lyapunov,
        terminal,
        mpc,
        constraints,
    })
}

fn fmt_vec(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.10}")).collect();
    format!("[{}]", items.join(", "))
}

pub fn design_report(sc: &Scenario, d: &Design) -> String {
    let n = sc.sys.n();
    let mut out = String::new();
    writeln!(out, "scenario: {}", sc.name).unwrap();
    writeln!(out, "controller: {}", sc.kind.as_str()).unwrap();
    writeln!(out, "state dimension: {n}").unwrap();
    writeln!(out, "K_db = {}", fmt_vec(&d.gain.k_db)).unwrap();
    writeln!(out, "S_n = {}", fmt_vec(&d.gain.s_inv_first_row)).unwrap();
    writeln!(out, "nilpotency index of A - B K_db: {} (n = {n})", d.gain.nilpotency_index).unwrap();
    if let Some(k) = &sc.stabilizing_gain {
        writeln!(out, "stabilizing gain K = {}", fmt_vec(k)).unwrap();
    }
    if let Some(l) = &d.lyapunov {
        writeln!(out, "A - BK Schur stable: yes (Lyapunov solution is positive definite)").unwrap();
        let ok = if l.residual <= LYAPUNOV_RESIDUAL_TOL * l.p.max_abs().max(1.0) {
            "OK"
        } else {
            "FAIL"
        };
        writeln!(out, "Lyapunov residual: {:.3e} (tol {LYAPUNOV_RESIDUAL_TOL:e}) {ok}", l.residual).unwrap();
    }
    if let Some(p) = &d.p {
        writeln!(out, "P =").unwrap();
        for i in 0..n {
            writeln!(out, "  {}", fmt_vec(p.row(i))).unwrap();
        }
    }
    if let Some(t) = &d.terminal {
        match t.scale {
            Some(s) => writeln!(out, "terminal box: auto-bisected scale {s:.10}, halfwidth {}", fmt_vec(&t.halfwidth)),
            None => writeln!(out, "terminal box: halfwidth {}", fmt_vec(&t.halfwidth)),
        }
        .unwrap();
        let verdict = if t.report.certified() { "certified" } else { "REJECTED" };
        writeln!(out, "terminal certificate: {verdict}; {}", t.report.summary()).unwrap();
        if sc.kind == ControllerKind::Constrained {
            writeln!(
                out,
                "terminal constraint: A_db^j x(n|k) in the box for j = 0..{} (invariant under A - B K_db)",
                n - 1
            )
            .unwrap();
        }
    }
    if let Some(mpc) = &d.mpc {
        let strict = if mpc.weight_uses_deadbeat_gain() {
            "guaranteed (K = K_db)"
        } else {
            "not guaranteed (K != K_db); checked empirically by verify"
        };
        writeln!(out, "cost decrease along the shifted candidate: {strict}").unwrap();
    }
    out
}

pub struct SimOutcome {
    pub trajectory: Trajectory,
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub report: PathBuf,
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn controller_for(sc: &Scenario, d: &Design) -> Box<dyn Controller> {
    match sc.kind {
        ControllerKind::UnconstrainedEquality => Box::new(TerminalEqualityMpc {
            sys: sc.sys.clone(),
            weights: sc.weights.clone(),
        }),
        ControllerKind::UnconstrainedTerminalCost => Box::new(TerminalCostMpc {
            sys: sc.sys.clone(),
            p: d.p.clone().expect("terminal-cost kind has P"),
        }),
        ControllerKind::Constrained => Box::new(d.mpc.clone().expect("constrained kind has mpc")),
    }
}

pub fn run(sc: &Scenario, d: &Design) -> Trajectory {
    let mut ctl = controller_for(sc, d);
    run_closed_loop(&sc.sys, ctl.as_mut(), &sc.x0, sc.steps, d.constraints.as_ref())
}

pub fn simulate(sc: &Scenario, out_dir: &Path) -> Result<SimOutcome, CliError> {
    let d = design(sc)?;
    let traj = run(sc, &d);
    fs::create_dir_all(out_dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let csv = out_dir.join(format!("{}.csv", sc.name));
    let svg = out_dir.join(format!("{}.svg", sc.name));
    let report = out_dir.join(format!("{}-design.txt", sc.name));
    write_file(&csv, &trajectory_csv(&traj))?;
    let bounds = d.constraints.as_ref().map(|c| (c.u_min(), c.u_max()));
    let title = format!("{} ({})", sc.name, sc.kind.as_str());
    write_file(&svg, &trajectory_svg(&traj, &title, bounds))?;
    write_file(&report, &design_report(sc, &d))?;
    if let Some(f) = &traj.failure {
        return Err(CliError::Infeasible(format!(
            "{f}; partial trajectory written to {}",
            csv.display()
        )));
    }
    Ok(SimOutcome {
        trajectory: traj,
        csv,
        svg,
        report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub skipped: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub scenario: String,
    pub controller: &'static str,
    pub seed: u64,
    pub runs: usize,
    pub properties: Vec<PropertyResult>,
    pub passed: bool,
}

fn prop(name: &'static str, passed: bool, detail: String) -> PropertyResult {
    PropertyResult {
        name,
        passed,
        skipped: false,
        detail,
    }
}

fn skipped(name: &'static str, why: &str) -> PropertyResult {
    PropertyResult {
        name,
        passed: true,
        skipped: true,
        detail: why.to_string(),
    }
}

const VERIFY_RUNS: usize = 20;
const DRAWS_PER_RUN: usize = 2000;

/// Random direction in `[-1, 1]ⁿ` scaled so the unconstrained deadbeat input
/// exceeds the bound by a factor in `[1.05, 2)`, kept only if the constrained
/// QP is feasible at `k = 0`.
fn saturating_draw(rng: &mut ChaCha8Rng, mpc: &mut ConstrainedMpc) -> Option<Vec<f64>> {
    let n = mpc.system().n();
    let bound = mpc.constraints().u_max().min(-mpc.constraints().u_min());
    for _ in 0..DRAWS_PER_RUN {
        let dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u = mpc.gain().control(&dir).abs();
        if u < 1e-9 {
            continue;
        }
        let s = bound * rng.gen_range(1.05..2.0) / u;
        let x0: Vec<f64> = dir.iter().map(|v| v * s).collect();
        mpc.reset();
        let ok = mpc.controller_step(&x0).map(|r| r.feasible).unwrap_or(false);
        mpc.reset();
        if ok {
            return Some(x0);
        }
    }
    None
}

pub fn verify(sc: &Scenario, seed: u64) -> Result<VerifyReport, CliError> {
    let d = design(sc)?;
    let n = sc.sys.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut properties = Vec::new();

    let a_db = sc.sys.closed_loop(&d.gain.k_db);
    let a_db_n = a_db.pow(n).map_err(validation)?.max_abs();
    properties.push(prop(
        "nilpotency",
        d.gain.nilpotency_index <= n,
        format!(
            "index {} <= n = {n}; ||(A - B K_db)^n||_max = {a_db_n:.3e}",
            d.gain.nilpotency_index
        ),
    ));

    let scale = norm_max(&sc.x0).max(1.0);
    let mut gain = d.gain.clone();
    let mut worst_settle = 0;
    let mut settle_fail = 0;
    let mut starts = vec![sc.x0.clone()];
    starts.extend((0..VERIFY_RUNS).map(|_| (0..n).map(|_| rng.gen_range(-scale..scale)).collect::<Vec<f64>>()));
    for x0 in &starts {
        if norm_max(x0) == 0.0 {
            continue;
        }
        let traj = run_closed_loop(&sc.sys, &mut gain, x0, n + 5, None);
        match traj.settling_index(1e-6 * norm_max(x0)) {
            Some(k) if k <= d.gain.nilpotency_index => worst_settle = worst_settle.max(k),
            _ => settle_fail += 1,
        }
    }
    properties.push(prop(
        "deadbeat-in-n",
        settle_fail == 0,
        format!(
            "{} initial states, worst settling step {worst_settle}, {settle_fail} failures",
            starts.len()
        ),
    ));

    let names = [
        "initial-feasibility",
        "recursive-feasibility",
        "constraint-admissibility",
        "cost-decrease",
        "decomposition",
        "perturbed-identity",
        "finite-time-settling",
    ];
    let Some(mpc) = d.mpc.clone() else {
        for name in names {
            properties.push(skipped(name, "only for kind = \"constrained\""));
        }
        return Ok(finish(sc, seed, starts.len(), properties));
    };
    let mut mpc = mpc;
    let spec = d.constraints.clone().expect("constrained");

    mpc.reset();
    let first = mpc.controller_step(&sc.x0).map_err(|e| CliError::Infeasible(e.to_string()))?;
    mpc.reset();
    properties.push(prop(
        names[0],
        first.feasible,
        if first.feasible {
            format!("scenario x0 feasible, J* = {:.6e}", first.objective)
        } else {
            format!(
                "scenario x0 infeasible; phase-1 scaled violation {:.3e}",
                first.infeasibility.unwrap_or(f64::NAN)
            )
        },
    ));

    let mut initial: Vec<Vec<f64>> = Vec::new();
    if first.feasible {
        initial.push(sc.x0.clone());
    }
    for _ in 0..VERIFY_RUNS {
        match saturating_draw(&mut rng, &mut mpc) {
            Some(x0) => initial.push(x0),
            None => break,
        }
    }
    let steps = sc.steps.max(3 * n);
    let mut infeasible_steps = 0;
    let mut candidate_rejections = 0;
    let mut violations = 0;
    let mut cost_bad = 0;
    let mut max_delta = f64::NEG_INFINITY;
    let mut worst_decomp: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    let mut unsettled = 0;
    let mut settle_range = (usize::MAX, 0);
    for x0 in &initial {
        mpc.reset();
        let traj = run_closed_loop(&sc.sys, &mut mpc, x0, steps, Some(&spec));
        if traj.failure.is_some() {
            infeasible_steps += 1;
        }
        violations += traj.constraint_violations;
        match traj.settled_at {
            Some(k) => settle_range = (settle_range.0.min(k), settle_range.1.max(k)),
            None => unsettled += 1,
        }
        let hist = mpc.history().to_vec();
        for s in hist.iter().filter(|s| s.feasible) {
            worst_decomp = worst_decomp.max(s.decomposition_residual);
        }
        for w in hist.windows(2) {
            if !(w[0].feasible && w[1].feasible) {
                continue;
            }
            let candidate = mpc.shifted_candidate(&w[0]);
            let check = mpc.verify_candidate(&w[1].state, &candidate);
            if !check.feasible() {
                candidate_rejections += 1;
            }
            let c = mpc.cost_decrease_check(&w[0], &w[1]).map_err(validation)?;
            max_delta = max_delta.max(c.delta);
            let candidate_cost = dot(&check.terminal_state, &mpc.terminal_weight().mul_vec(&check.terminal_state));
            if c.violated || w[1].objective > candidate_cost + 1e-9 * candidate_cost.abs().max(1.0) {
                cost_bad += 1;
            }
        }
        let states = traj.states();
        let x_scale = norm_max(x0);
        for k in n..states.len().min(hist.len() + 1) {
            let terminals: Vec<Vec<f64>> = hist[k - n..k].iter().map(|s| s.terminal_state.clone()).collect();
            let x = mpc.perturbed_state(&terminals);
            let diff = x.iter().zip(states[k]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst_identity = worst_identity.max(diff / x_scale.max(norm_max(states[k])));
        }
    }
    let runs = initial.len();
    let none = runs == 0;
    let no_runs = "no feasible initial state; nothing to check".to_string();
    properties.push(prop(
        names[1],
        !none && infeasible_steps == 0 && candidate_rejections == 0,
        if none {
            no_runs.clone()
        } else {
            format!("{runs} runs of {steps} steps: {infeasible_steps} infeasible runs, {candidate_rejections} shifted candidates rejected")
        },
    ));
    properties.push(prop(
        names[2],
        !none && violations == 0,
        if none { no_runs.clone() } else { format!("{violations} visited states or inputs outside X / U") },
    ));
    let strict = mpc.weight_uses_deadbeat_gain();
    properties.push(prop(
        names[3],
        !none && cost_bad == 0,
        if none {
            no_runs.clone()
        } else {
            format!(
                "J*(k+1) <= J(shifted candidate) at every step{}; max J*(k+1) - J*(k) = {max_delta:.3e}; {cost_bad} violations",
                if strict { " and J*(k+1) <= J*(k) (K = K_db)" } else { "" }
            )
        },
    ));
    properties.push(prop(
        names[4],
        !none && worst_decomp <= DECOMPOSITION_TOL,
        if none {
            no_runs.clone()
        } else {
            format!("max |u* - (-K_db x + S_n' x*(n|k))| = {worst_decomp:.3e} (tol {DECOMPOSITION_TOL:e})")
        },
    ));
    properties.push(prop(
        names[5],
        !none && worst_identity <= 1e-6,
        if none {
            no_runs.clone()
        } else {
            format!("max relative deviation of x(k) from the terminal-state sum for k >= {n}: {worst_identity:.3e} (tol 1e-6)")
        },
    ));
    properties.push(prop(
        names[6],
        !none && unsettled == 0 && settle_range.0 >= d.gain.nilpotency_index,
        if none {
            no_runs
        } else {
            format!(
                "settled_at in [{}, {}], {unsettled} runs unsettled after {steps} steps",
                settle_range.0, settle_range.1
            )
        },
    ));
    Ok(finish(sc, seed, runs, properties))
}

fn finish(sc: &Scenario, seed: u64, runs: usize, properties: Vec<PropertyResult>) -> VerifyReport {
    VerifyReport {
        scenario: sc.name.clone(),
        controller: sc.kind.as_str(),
        seed,
        runs,
        passed: properties.iter().all(|p| p.passed),
        properties,
    }
}
