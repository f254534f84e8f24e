#![allow(dead_code)]

use deadbeat_mpc::cmpc::{bisect_terminal_scale, ConstrainedMpc};
use deadbeat_mpc::deadbeat::{deadbeat_gain, WeightSpec};
use deadbeat_mpc::lti::{ConstraintSpec, LinearSystem};
use deadbeat_mpc::matrix::Mat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;

pub const K_STAB: [f64; 3] = [2.2150, 15.0471, 14.6128];
pub const K_DB_PRINTED: [f64; 3] = [7.2258, 25.1192, 12.6558];
pub const U_BOUND: f64 = 6.0;
pub const STATE_BOUND: f64 = 10.0;
pub const P_PRINTED: [[f64; 3]; 3] = [
    [6.159, 19.4637, 5.8133],
    [19.4637, 96.817, 40.0967],
    [5.8133, 40.0967, 29.9412],
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn example_plant() -> LinearSystem {
    LinearSystem::from_parts(
        &[vec![1.1, 2.0, 0.0], vec![0.0, 0.95, 1.0], vec![0.0, 0.0, 1.2]],
        &[0.0, 0.079, 0.1],
    )
    .unwrap()
}

pub fn printed_p() -> Mat {
    Mat::from_rows(&P_PRINTED.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

pub fn example_weights() -> WeightSpec {
    WeightSpec::identity(3, 0.1).unwrap()
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, half: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-half..half)).collect()
}

/// `‖M‖_max · ‖M⁻¹‖_max · n`, a cheap conditioning proxy.
pub fn condition_proxy(m: &Mat) -> f64 {
    match m.lu_solve(&Mat::identity(m.rows())) {
        Ok(inv) => m.max_abs() * inv.max_abs() * m.rows() as f64,
        Err(_) => f64::INFINITY,
    }
}

/// Random controllable pair with entries in `[-1, 1]`, rejecting badly
/// conditioned controllability matrices.
pub fn random_system(rng: &mut ChaCha8Rng, n: usize, max_cond: f64) -> LinearSystem {
    loop {
        let a: Vec<Vec<f64>> = (0..n).map(|_| uniform_vec(rng, n, 1.0)).collect();
        let b = uniform_vec(rng, n, 1.0);
        let Ok(sys) = LinearSystem::from_parts(&a, &b) else { continue };
        if condition_proxy(&sys.controllability_matrix()) <= max_cond {
            return sys;
        }
    }
}

/// Example plant with `|x_i| ≤ 10`, `|u| ≤ 6` and the terminal box bisected
/// along `(1, 1, 1)`.
pub fn example_constraints() -> ConstraintSpec {
    let sys = example_plant();
    let gain = deadbeat_gain(&sys).unwrap();
    let (h, rhs) = ConstraintSpec::state_box_rows(&[STATE_BOUND; 3]);
    let spec = ConstraintSpec::new(3, &h, &rhs, -U_BOUND, U_BOUND, &[1.0; 3]).unwrap();
    let sizing = bisect_terminal_scale(&sys, &spec, &gain, &[1.0; 3]).unwrap();
    spec.with_terminal_halfwidth(&sizing.halfwidth).unwrap()
}

pub fn example_mpc() -> ConstrainedMpc {
    ConstrainedMpc::design(example_plant(), example_constraints(), &K_STAB, &example_weights())
        .unwrap()
        .0
}

/// Draws `x0` along a random direction, scaled so that `|K_db x0|` lies in
/// `6 · [1.05, 2)`, until the constrained QP is feasible at `k = 0`.
pub fn saturating_feasible_x0(rng: &mut ChaCha8Rng, mpc: &mut ConstrainedMpc) -> Vec<f64> {
    for _ in 0..10_000 {
        let dir = uniform_vec(rng, 3, 1.0);
        let target = U_BOUND * rng.gen_range(1.05..2.0);
        let u_dir = mpc.gain().control(&dir).abs();
        if u_dir < 1e-6 {
            continue;
        }
        let x0: Vec<f64> = dir.iter().map(|v| v * target / u_dir).collect();
        mpc.reset();
        let feasible = mpc.controller_step(&x0).map(|r| r.feasible).unwrap_or(false);
        mpc.reset();
        if feasible {
            return x0;
        }
    }
    panic!("no feasible saturating initial state found");
}
