//! Linear-quadratic control by policy iteration over BSDE solvers.
//!
//! The crate simulates controlled linear SDEs, solves the value or co-state
//! BSDE along the simulated paths (least-squares Monte Carlo or time
//! reversal), and improves the feedback gain from the fitted solution. A
//! Riccati solver provides the exact answer to compare against.

pub mod error;
pub mod experiments;
pub mod forward_sim;
pub mod func_approx;
pub mod linalg;
pub mod lq_model;
pub mod lsmc;
pub mod policy;
pub mod riccati;
pub mod rng;
pub mod score;
pub mod tr;

pub use error::{Error, Result};
pub use forward_sim::{estimate_cost, simulate_forward, ControlLaw, CostEstimate, TrajectoryBatch};
pub use func_approx::{fit_linear, fit_quadratic, Fitted, LinearFn, QuadraticFn};
pub use lq_model::{builtin_2d, make_lq, mass_spring, LqConfig, LqProblem, TimeGrid};
pub use lsmc::{lsmc_solve, ApproxSolution, DriverKind, PhiSequence, SolveFlags};
pub use policy::{
    extract_gain, mse_vs_oracle, run_policy_iteration, IterationHistory, Method, PolicyConfig,
};
pub use riccati::{solve_riccati, RiccatiSolution};
pub use score::{fit_affine_score, fit_scores, AffineScore, Jitter};
pub use tr::{tr_solve, ReversedBatch};

pub use nalgebra::{DMatrix, DVector};
