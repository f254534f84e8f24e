//! Deadbeat model predictive control for discrete-time SISO linear systems.
//!
//! With the control horizon equal to the state dimension `n`, the
//! unconstrained MPC laws (terminal equality or terminal cost only) reduce to
//! the linear deadbeat gain `K_db = e₁ᵀ S⁻¹ Aⁿ`, and the constrained law (terminal
//! cost `xᵀ(n|k) P x(n|k)` with `P` from a discrete Lyapunov equation) reaches
//! the origin in finite time once the state enters the terminal box.
//!
//! Modules, bottom-up:
//!
//! - [`matrix`]: dense kernel (LU, Cholesky, powers, Kronecker products)
//! - [`lti`]: plant, constraint sets, prediction stacking
//! - [`deadbeat`]: unconstrained deadbeat MPC and the explicit gain
//! - [`lyap`]: discrete Lyapunov solver and Schur-stability certificate
//! - [`qp`]: primal active-set QP solver
//! - [`cmpc`]: constrained deadbeat MPC and its certificates
//! - [`simkit`]: closed-loop simulation
//! - [`export`]: trajectory CSV and SVG

pub mod cmpc;
pub mod deadbeat;
pub mod export;
pub mod lti;
pub mod lyap;
pub mod matrix;
pub mod qp;
pub mod simkit;

pub use cmpc::{bisect_terminal_scale, verify_terminal_set, ConstrainedMpc, StepResult, TerminalSetReport};
pub use deadbeat::{deadbeat_gain, DeadbeatGain, WeightSpec};
pub use lti::{ConstraintSpec, LinearSystem, PredictionStack};
pub use matrix::Mat;
pub use simkit::{run_closed_loop, Controller, Trajectory};
