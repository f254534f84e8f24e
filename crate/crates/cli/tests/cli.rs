use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deadbeat_mpc::export::parse_trajectory_csv;
use deadbeat_mpc::lti::LinearSystem;

const BIN: &str = env!("CARGO_BIN_EXE_deadbeat-mpc");

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("DEADBEAT_MPC_LOG").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a variant of a bundled scenario with textual replacements applied.
fn variant(dir: &Path, base: &str, replacements: &[(&str, &str)]) -> PathBuf {
    let mut text = fs::read_to_string(scenario(base)).unwrap();
    for (from, to) in replacements {
        assert!(text.contains(from), "{from:?} not in {base}");
        text = text.replace(from, to);
    }
    let path = dir.join(base);
    fs::write(&path, text).unwrap();
    path
}

fn example_plant() -> LinearSystem {
    LinearSystem::from_parts(
        &[vec![1.1, 2.0, 0.0], vec![0.0, 0.95, 1.0], vec![0.0, 0.0, 1.2]],
        &[0.0, 0.079, 0.1],
    )
    .unwrap()
}

fn parse_vec(line: &str) -> Vec<f64> {
    let inner = line.split('[').nth(1).unwrap().split(']').next().unwrap();
    inner.split(',').map(|s| s.trim().parse().unwrap()).collect()
}

#[test]
fn version_and_help() {
    let o = run(&["--version"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains(env!("CARGO_PKG_VERSION")));
    let o = run(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for cmd in ["design", "simulate", "verify", "DEADBEAT_MPC_LOG"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn usage_error_is_validation_exit() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["design"]).status.code(), Some(1));
}

#[test]
fn design_prints_gain_and_certificate() {
    let o = run(&["design", scenario("example-constrained.toml").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let k_line = text.lines().find(|l| l.starts_with("K_db = ")).unwrap();
    let k = parse_vec(k_line);
    for (a, b) in k.iter().zip([7.2258, 25.1192, 12.6558]) {
        assert!((a - b).abs() <= 1e-3, "{k:?}");
    }
    assert!(text.contains("nilpotency index of A - B K_db: 3"));
    assert!(text.lines().any(|l| l.starts_with("Lyapunov residual") && l.ends_with("OK")));
    assert!(text.contains("terminal certificate: certified"));
    assert!(text.contains("P =\n"));
}

#[test]
fn scalar_plant_gain() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scalar.toml");
    fs::write(
        &path,
        "[plant]\na = [[2.0]]\nb = [1.0]\n[controller]\nkind = \"unconstrained-equality\"\n\
         [simulation]\nx0 = [1.0]\nsteps = 3\n",
    )
    .unwrap();
    let o = run(&["design", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let k = parse_vec(stdout(&o).lines().find(|l| l.starts_with("K_db")).unwrap());
    assert_eq!(k, vec![2.0]);
}

#[test]
fn destabilizing_gain_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = variant(
        dir.path(),
        "example-constrained.toml",
        &[("stabilizing_gain = [2.2150, 15.0471, 14.6128]", "stabilizing_gain = [0.0, 0.0, 0.0]")],
    );
    let o = run(&["design", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("controller.stabilizing_gain"), "{}", stderr(&o));
    assert!(stderr(&o).contains("Schur"));
}

#[test]
fn malformed_scenario_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = variant(dir.path(), "example-unconstrained.toml", &[("b = [0.0, 0.079, 0.1]", "b = [0.0, 0.079]")]);
    let o = run(&["simulate", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("plant.b: expected 3 entries, got 2"), "{}", stderr(&o));

    let path = variant(dir.path(), "example-unconstrained.toml", &[("steps = 10", "steps = \"ten\"")]);
    let o = run(&["design", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));
}

#[test]
fn unconstrained_simulation_reaches_origin_in_three_steps() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "simulate",
        scenario("example-unconstrained.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("example-unconstrained.csv")).unwrap();
    assert!(csv.starts_with("k,x1,x2,x3,u,objective,terminal_norm,active_set_size\n"));
    let rows = parse_trajectory_csv(&csv).unwrap();
    let x0 = rows[0].x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for r in &rows[3..] {
        assert!(r.x.iter().all(|v| v.abs() <= 1e-6 * x0), "row {}: {:?}", r.k, r.x);
    }
    assert!(rows.iter().all(|r| r.objective.is_none() && r.active_set_size.is_none()));
    let svg = fs::read_to_string(dir.path().join("example-unconstrained.svg")).unwrap();
    assert!(svg.contains(r#"width="900" height="600""#));
    assert_eq!(svg.matches(r##"stroke="#444""##).count(), 2);
    assert!(dir.path().join("example-unconstrained-design.txt").exists());
}

#[test]
fn constrained_simulation_respects_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "simulate",
        scenario("example-constrained.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("example-constrained.csv")).unwrap();
    let rows = parse_trajectory_csv(&csv).unwrap();
    let sys = example_plant();
    let mut saturated = false;
    for w in rows.windows(2) {
        let u = w[0].u.unwrap();
        assert!(u.abs() <= 6.0 + 1e-8);
        saturated |= u.abs() >= 6.0 - 1e-9;
        let next = sys.step(&w[0].x, u);
        for (a, b) in next.iter().zip(&w[1].x) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        assert!(w[0].objective.is_some() && w[0].active_set_size.is_some());
    }
    assert!(saturated, "the fixture should saturate the input");
    let svg = fs::read_to_string(dir.path().join("example-constrained.svg")).unwrap();
    assert_eq!(svg.matches("stroke-dasharray").count(), 2);
}

#[test]
fn zero_initial_state_gives_flat_output() {
    let dir = tempfile::tempdir().unwrap();
    let path = variant(dir.path(), "example-unconstrained.toml", &[("x0 = [0.0, 0.0, 0.55]", "x0 = [0.0, 0.0, 0.0]")]);
    let o = run(&["simulate", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = parse_trajectory_csv(&fs::read_to_string(dir.path().join("example-unconstrained.csv")).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.x.iter().all(|v| *v == 0.0) && r.u.unwrap_or(0.0) == 0.0));
    let svg = fs::read_to_string(dir.path().join("example-unconstrained.svg")).unwrap();
    assert_eq!(svg.matches(r##"stroke="#444""##).count(), 1);
}

#[test]
fn tiny_input_bounds_are_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let path = variant(
        dir.path(),
        "example-constrained.toml",
        &[("u_min = -6.0\nu_max = 6.0", "u_min = -0.001\nu_max = 0.001")],
    );
    let o = run(&["simulate", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("infeasible"));

    let o = run(&["verify", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let initial = report["properties"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["name"] == "initial-feasibility")
        .unwrap();
    assert_eq!(initial["passed"], false);
    assert!(initial["detail"].as_str().unwrap().contains("phase-1"));
}

#[test]
fn verify_passes_on_examples() {
    for name in ["example-constrained.toml", "example-unconstrained.toml", "example-terminal-cost.toml"] {
        let o = run(&["verify", scenario(name).to_str().unwrap(), "--seed", "0"]);
        assert!(o.status.success(), "{name}: {}{}", stdout(&o), stderr(&o));
        let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(report["passed"], true);
        let names: Vec<&str> = report["properties"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p["name"].as_str().unwrap())
            .collect();
        for expected in [
            "deadbeat-in-n",
            "nilpotency",
            "recursive-feasibility",
            "cost-decrease",
            "decomposition",
            "perturbed-identity",
        ] {
            assert!(names.contains(&expected), "{name}: {names:?}");
        }
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let o = run(&[
            "simulate",
            scenario("example-constrained.toml").to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    for file in ["example-constrained.csv", "example-constrained.svg"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap());
    }
    let v1 = run(&["verify", scenario("example-constrained.toml").to_str().unwrap(), "--seed", "7"]);
    let v2 = run(&["verify", scenario("example-constrained.toml").to_str().unwrap(), "--seed", "7"]);
    assert_eq!(v1.stdout, v2.stdout);
}

#[test]
fn log_levels() {
    let path = scenario("example-constrained.toml");
    let with = |level: &str| {
        Command::new(BIN)
            .args(["design", path.to_str().unwrap()])
            .env("DEADBEAT_MPC_LOG", level)
            .output()
            .unwrap()
    };
    let quiet = with("quiet");
    assert!(quiet.status.success());
    assert!(quiet.stderr.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let debug = Command::new(BIN)
        .args(["simulate", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .env("DEADBEAT_MPC_LOG", "debug")
        .output()
        .unwrap();
    assert!(debug.status.success());
    assert!(stderr(&debug).contains("DEBUG"), "{}", stderr(&debug));
    let bogus = with("loud");
    assert!(bogus.status.success());
    assert!(stderr(&bogus).contains("quiet|info|debug"));
}
