//! Scenario files (TOML). The schema is documented in `scenarios/README.md`.

use std::fmt;
use std::path::{Path, PathBuf};

use deadbeat_mpc::deadbeat::WeightSpec;
use deadbeat_mpc::lti::{ConstraintSpec, LinearSystem};
use deadbeat_mpc::matrix::Mat;
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioError {
    /// Syntax or type error reported by the TOML parser (carries line/column).
    Parse(String),
    /// A value that parsed but is inconsistent, tagged with its field path.
    Field { field: String, msg: String },
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Parse(msg) => write!(f, "{msg}"),
            ScenarioError::Field { field, msg } => write!(f, "{field}: {msg}"),
        }
    }
}

impl std::error::Error for ScenarioError {}

fn field_err<T>(field: impl Into<String>, msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Field {
        field: field.into(),
        msg: msg.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    UnconstrainedEquality,
    UnconstrainedTerminalCost,
    Constrained,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::UnconstrainedEquality => "unconstrained-equality",
            ControllerKind::UnconstrainedTerminalCost => "unconstrained-terminal-cost",
            ControllerKind::Constrained => "constrained",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    plant: RawPlant,
    #[serde(default)]
    weights: RawWeights,
    controller: RawController,
    constraints: Option<RawConstraints>,
    simulation: RawSimulation,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlant {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeights {
    q: Option<Vec<Vec<f64>>>,
    r: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawController {
    kind: ControllerKind,
    stabilizing_gain: Option<Vec<f64>>,
    terminal_weight: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawTerminal {
    Keyword(String),
    Halfwidth(Vec<f64>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConstraints {
    u_min: f64,
    u_max: f64,
    state_h: Option<Vec<Vec<f64>>>,
    state_rhs: Option<Vec<f64>>,
    terminal: Option<RawTerminal>,
    terminal_shape: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    x0: Vec<f64>,
    steps: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    name: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TerminalChoice {
    /// Bisect the scale of `shape` against the vertex certificate.
    AutoBisect { shape: Vec<f64> },
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct Constraints {
    /// Stage constraints; its terminal halfwidth is a placeholder when the
    /// terminal box is bisected.
    pub spec: ConstraintSpec,
    pub terminal: TerminalChoice,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub sys: LinearSystem,
    pub weights: WeightSpec,
    pub kind: ControllerKind,
    pub stabilizing_gain: Option<Vec<f64>>,
    pub terminal_weight: Option<Mat>,
    pub constraints: Option<Constraints>,
    pub x0: Vec<f64>,
    pub steps: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn dims_matrix(field: &str, rows: &[Vec<f64>], n: usize) -> Result<Mat, ScenarioError> {
    if rows.len() != n {
        return field_err(field, format!("expected {n} rows, got {}", rows.len()));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n {
            return field_err(format!("{field}[{i}]"), format!("expected {n} entries, got {}", r.len()));
        }
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return field_err(format!("{field}[{i}][{j}]"), "must be finite");
        }
    }
    Mat::from_rows(rows).or_else(|e| field_err(field, e.to_string()))
}

fn dims_vec(field: &str, v: &[f64], n: usize) -> Result<(), ScenarioError> {
    if v.len() != n {
        return field_err(field, format!("expected {n} entries, got {}", v.len()));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return field_err(format!("{field}[{i}]"), "must be finite");
    }
    Ok(())
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Parse(format!("cannot read {}: {e}", path.display())))?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".into());
        Self::parse(&text, &stem).map_err(|e| match e {
            ScenarioError::Parse(msg) => ScenarioError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, default_name: &str) -> Result<Self, ScenarioError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let n = raw.plant.a.len();
        if n == 0 {
            return field_err("plant.a", "must have at least one row");
        }
        let a = dims_matrix("plant.a", &raw.plant.a, n)?;
        dims_vec("plant.b", &raw.plant.b, n)?;
        let b = Mat::column(&raw.plant.b).or_else(|e| field_err("plant.b", e.to_string()))?;
        let sys = LinearSystem::new(a, b).or_else(|e| field_err("plant", e.to_string()))?;

        let q = match &raw.weights.q {
            Some(rows) => dims_matrix("weights.q", rows, n)?,
            None => Mat::identity(n),
        };
        let r = raw.weights.r.unwrap_or(1.0);
        let weights = WeightSpec::new(q, r).or_else(|e| field_err("weights", e.to_string()))?;

        let kind = raw.controller.kind;
        if let Some(k) = &raw.controller.stabilizing_gain {
            dims_vec("controller.stabilizing_gain", k, n)?;
        }
        let terminal_weight = match &raw.controller.terminal_weight {
            Some(rows) => {
                if kind != ControllerKind::UnconstrainedTerminalCost {
                    return field_err(
                        "controller.terminal_weight",
                        "only used by kind = \"unconstrained-terminal-cost\"; the constrained controller \
                         derives P from stabilizing_gain",
                    );
                }
                Some(dims_matrix("controller.terminal_weight", rows, n)?)
            }
            None => None,
        };
        if kind == ControllerKind::Constrained && raw.controller.stabilizing_gain.is_none() {
            return field_err("controller.stabilizing_gain", "required for kind = \"constrained\"");
        }

        let constraints = match raw.constraints {
            Some(c) => Some(parse_constraints(c, n)?),
            None if kind == ControllerKind::Constrained => {
                return field_err("constraints", "section required for kind = \"constrained\"")
            }
            None => None,
        };

        dims_vec("simulation.x0", &raw.simulation.x0, n)?;
        if raw.simulation.steps == 0 {
            return field_err("simulation.steps", "must be at least 1");
        }
        let name = raw.output.name.unwrap_or_else(|| default_name.to_string());
        if name.is_empty() || name.contains(['/', '\\']) {
            return field_err("output.name", format!("{name:?} is not a plain file stem"));
        }
        Ok(Scenario {
            name,
            sys,
            weights,
            kind,
            stabilizing_gain: raw.controller.stabilizing_gain,
            terminal_weight,
            constraints,
            x0: raw.simulation.x0,
            steps: raw.simulation.steps,
            seed: raw.simulation.seed,
            out_dir: raw.output.dir.unwrap_or_else(|| PathBuf::from("out")),
        })
    }
}

fn parse_constraints(c: RawConstraints, n: usize) -> Result<Constraints, ScenarioError> {
    let (h, rhs) = match (c.state_h, c.state_rhs) {
        (Some(h), Some(rhs)) => (h, rhs),
        (None, None) => (Vec::new(), Vec::new()),
        (Some(_), None) => return field_err("constraints.state_rhs", "required when state_h is given"),
        (None, Some(_)) => return field_err("constraints.state_h", "required when state_rhs is given"),
    };
    if h.len() != rhs.len() {
        return field_err(
            "constraints.state_rhs",
            format!("expected {} entries (one per state_h row), got {}", h.len(), rhs.len()),
        );
    }
    for (i, row) in h.iter().enumerate() {
        dims_vec(&format!("constraints.state_h[{i}]"), row, n)?;
    }
    let terminal = match c.terminal {
        None => TerminalChoice::AutoBisect {
            shape: shape_or_default(c.terminal_shape, n)?,
        },
        Some(RawTerminal::Keyword(k)) if k == "auto-bisect" => TerminalChoice::AutoBisect {
            shape: shape_or_default(c.terminal_shape, n)?,
        },
        Some(RawTerminal::Keyword(k)) => {
            return field_err(
                "constraints.terminal",
                format!("expected \"auto-bisect\" or a list of halfwidths, got {k:?}"),
            )
        }
        Some(RawTerminal::Halfwidth(eps)) => {
            dims_vec("constraints.terminal", &eps, n)?;
            if c.terminal_shape.is_some() {
                return field_err("constraints.terminal_shape", "only used with terminal = \"auto-bisect\"");
            }
            TerminalChoice::Fixed(eps)
        }
    };
    let placeholder = match &terminal {
        TerminalChoice::Fixed(eps) => eps.clone(),
        TerminalChoice::AutoBisect { shape } => shape.clone(),
    };
    let spec = ConstraintSpec::new(n, &h, &rhs, c.u_min, c.u_max, &placeholder).or_else(|e| {
        let msg = e.to_string();
        let field = if msg.contains("terminal") {
            "constraints.terminal"
        } else if msg.contains("u_min") {
            "constraints.u_min/u_max"
        } else {
            "constraints"
        };
        field_err(field, msg)
    })?;
    Ok(Constraints { spec, terminal })
}

fn shape_or_default(shape: Option<Vec<f64>>, n: usize) -> Result<Vec<f64>, ScenarioError> {
    match shape {
        Some(s) => {
            dims_vec("constraints.terminal_shape", &s, n)?;
            if let Some(i) = s.iter().position(|v| *v <= 0.0) {
                return field_err(format!("constraints.terminal_shape[{i}]"), "must be positive");
            }
            Ok(s)
        }
        None => Ok(vec![1.0; n]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[plant]
a = [[1.1, 2.0, 0.0], [0.0, 0.95, 1.0], [0.0, 0.0, 1.2]]
b = [0.0, 0.079, 0.1]

[controller]
kind = "unconstrained-equality"

[simulation]
x0 = [1.0, -1.0, 0.5]
steps = 10
"#;

    fn err_of(text: &str) -> String {
        Scenario::parse(text, "t").unwrap_err().to_string()
    }

    #[test]
    fn parses_minimal() {
        let s = Scenario::parse(BASE, "t").unwrap();
        assert_eq!(s.sys.n(), 3);
        assert_eq!(s.kind, ControllerKind::UnconstrainedEquality);
        assert_eq!(s.name, "t");
        assert_eq!(s.seed, 0);
    }

    #[test]
    fn names_bad_row() {
        let text = BASE.replace("[0.0, 0.95, 1.0]", "[0.0, 0.95]");
        assert_eq!(err_of(&text), "plant.a[1]: expected 3 entries, got 2");
    }

    #[test]
    fn names_bad_b() {
        let text = BASE.replace("b = [0.0, 0.079, 0.1]", "b = [0.0, 0.079]");
        assert_eq!(err_of(&text), "plant.b: expected 3 entries, got 2");
    }

    #[test]
    fn syntax_errors_carry_line() {
        let text = BASE.replace("steps = 10", "steps = ten");
        let e = err_of(&text);
        assert!(e.contains("line"), "{e}");
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = format!("{BASE}\n[output]\nfolder = \"x\"\n");
        assert!(err_of(&text).contains("folder"));
    }

    #[test]
    fn constrained_requires_gain_and_constraints() {
        let text = BASE.replace("unconstrained-equality", "constrained");
        assert!(err_of(&text).starts_with("controller.stabilizing_gain"));
        let text = text.replace("kind = \"constrained\"", "kind = \"constrained\"\nstabilizing_gain = [1, 2, 3]");
        assert!(err_of(&text).starts_with("constraints:"));
    }

    #[test]
    fn terminal_keyword_and_list() {
        let c = "\n[constraints]\nu_min = -6.0\nu_max = 6.0\nterminal = \"auto-bisect\"\nterminal_shape = [1, 2, 3]\n";
        let s = Scenario::parse(&format!("{BASE}{c}"), "t").unwrap();
        assert_eq!(
            s.constraints.unwrap().terminal,
            TerminalChoice::AutoBisect { shape: vec![1.0, 2.0, 3.0] }
        );
        let c = "\n[constraints]\nu_min = -6.0\nu_max = 6.0\nterminal = [0.1, 0.1, 0.1]\n";
        let s = Scenario::parse(&format!("{BASE}{c}"), "t").unwrap();
        assert_eq!(s.constraints.unwrap().terminal, TerminalChoice::Fixed(vec![0.1; 3]));
        let c = "\n[constraints]\nu_min = -6.0\nu_max = 6.0\nterminal = \"grow\"\n";
        assert!(err_of(&format!("{BASE}{c}")).starts_with("constraints.terminal:"));
    }

    #[test]
    fn state_rows_checked() {
        let c = "\n[constraints]\nu_min = -6.0\nu_max = 6.0\nstate_h = [[1, 0, 0], [0, 1]]\nstate_rhs = [1, 1]\n";
        assert_eq!(
            err_of(&format!("{BASE}{c}")),
            "constraints.state_h[1]: expected 3 entries, got 2"
        );
    }

    #[test]
    fn uncontrollable_plant_rejected() {
        let text = BASE.replace("b = [0.0, 0.079, 0.1]", "b = [1.0, 0.0, 0.0]");
        assert!(err_of(&text).starts_with("plant:"));
    }
}
