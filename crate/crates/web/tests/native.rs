use deadbeat_mpc_web::{design_json, simulate_json, terminal_set_json};
use serde_json::Value;

const EXAMPLE: &str = r#"{
  "a": [[1.1, 2.0, 0.0], [0.0, 0.95, 1.0], [0.0, 0.0, 1.2]],
  "b": [0.0, 0.079, 0.1],
  "stabilizing_gain": [2.215, 15.0471, 14.6128],
  "r": 0.1,
  "u_bound": 6.0,
  "state_bound": 10.0,
  "x0": [0.0, 0.0, 0.55],
  "steps": 20
}"#;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn design_reports_gain_and_terminal_box() {
    let v = parse(&design_json(EXAMPLE).unwrap());
    let k: Vec<f64> = serde_json::from_value(v["k_db"].clone()).unwrap();
    for (a, b) in k.iter().zip([7.2258, 25.1192, 12.6558]) {
        assert!((a - b).abs() < 1e-3);
    }
    assert_eq!(v["nilpotency_index"], 3);
    assert!(v["lyapunov_residual"].as_f64().unwrap() <= 1e-8);
    assert_eq!(v["terminal"]["certified"], true);
    assert_eq!(v["terminal"]["box_invariant"], false);
}

#[test]
fn simulate_compares_both_controllers() {
    let v = parse(&simulate_json(EXAMPLE).unwrap());
    assert_eq!(v["unconstrained"]["settled_at"], 3);
    assert!(v["unconstrained"]["max_abs_u"].as_f64().unwrap() > 6.0);
    let c = &v["constrained"];
    assert!(c["failure"].is_null());
    assert!(c["max_abs_u"].as_f64().unwrap() <= 6.0 + 1e-8);
    assert!(c["settled_at"].as_u64().unwrap() >= 3);
    assert_eq!(c["constraint_violations"], 0);
    assert!(c["svg"].as_str().unwrap().starts_with("<svg"));
    assert!(v["constrained_csv"].as_str().unwrap().starts_with("k,x1,x2,x3,u,"));
}

#[test]
fn terminal_set_lists_binding_conditions() {
    let v = parse(&terminal_set_json(EXAMPLE).unwrap());
    assert!(v["scale"].as_f64().unwrap() > 0.0);
    assert!(!v["binding_above_scale"].as_array().unwrap().is_empty());
}

#[test]
fn bad_config_is_an_error_message() {
    let e = design_json(&EXAMPLE.replace("\"b\": [0.0, 0.079, 0.1]", "\"b\": [0.0, 0.079]")).unwrap_err();
    assert_eq!(e, "b: expected 3 entries, got 2");
    assert!(simulate_json("{").unwrap_err().starts_with("config:"));
}
