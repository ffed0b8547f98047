//! Monte-Carlo toolkit for partially observed optimal control of
//! forward-backward stochastic systems with jump diffusion.
//!
//! The crate simulates the controlled forward system under the reference
//! measure, solves the backward equations (state, cost and adjoint) by
//! least-squares Monte Carlo, assembles cost gradients from the Hamiltonian,
//! and checks first-order optimality of observation-adapted feedback
//! policies.

pub mod bench;
pub mod bsde;
pub mod error;
pub mod export;
pub mod forward;
pub mod gradient;
pub mod hamiltonian;
pub mod noise;
pub mod optimizer;
pub mod policy;
pub mod problem;
pub mod regression;

pub use error::{Error, Result};
pub use noise::{make_grid, sample_noise, NoiseBundle, TimeGrid};
pub use policy::{ControlPolicy, PolicyFeatures};
pub use problem::{
    builtin_lq_problem, builtin_lq_problem_with_horizon, validate_spec, Coefficients, ControlSet,
    LqParams, MarkSpace, ProblemConfig, ProblemSpec, ScalarCoefficients,
};
