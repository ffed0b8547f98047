//! Problem definition: dimensions, horizon, coefficient maps with first
//! derivatives, jump mark space and the (box) control set, together with
//! sample-based validation of the standing regularity assumptions.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite jump mark space with nonnegative intensity weights.
///
/// Marks are identified by their index `0..M`; `weights[i]` is the intensity
/// mass carried by mark `i` (units 1/time). `M = 0` means no jumps.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkSpace {
    pub weights: Vec<f64>,
}

impl MarkSpace {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        for (i, &w) in weights.iter().enumerate() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "mark weight {i} must be finite and nonnegative, got {w}"
                )));
            }
        }
        Ok(MarkSpace { weights })
    }

    pub fn none() -> Self {
        MarkSpace { weights: vec![] }
    }

    pub fn mark_count(&self) -> usize {
        self.weights.len()
    }

    /// Total intensity mass.
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Box control set; components may be unbounded (`-inf` / `+inf`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidArgument(
                "control bounds must have equal length".into(),
            ));
        }
        for i in 0..lower.len() {
            if lower[i].is_nan() || upper[i].is_nan() || lower[i] > upper[i] {
                return Err(Error::InvalidArgument(format!(
                    "control bounds must satisfy lower <= upper, got [{}, {}] at {}",
                    lower[i], upper[i], i
                )));
            }
        }
        Ok(ControlSet { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.iter().all(|v| v.is_finite()) && self.upper.iter().all(|v| v.is_finite())
    }

    /// Euclidean projection onto the box, in place.
    pub fn project(&self, u: &mut [f64]) {
        for i in 0..u.len() {
            u[i] = u[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lower[i] && v <= self.upper[i])
    }
}

/// Coefficient maps of the controlled system and their first derivatives.
///
/// Vector- and matrix-valued evaluators write into `out` (matrices row-major);
/// implementations must `clear` and fill exactly the documented number of
/// entries — validation checks the counts. The jump argument `lambda` is the
/// flattened `m x M` block, component-major: `lambda[j * M + i]` is component
/// `j` at mark `i`.
#[allow(clippy::too_many_arguments)]
pub trait Coefficients: Send + Sync {
    // forward coefficients
    fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>); // R^n
    fn diffusion_w(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>); // R^n
    fn diffusion_y(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>); // R^n
    fn jump_coeff(&self, t: f64, x: &[f64], u: &[f64], mark: usize, out: &mut Vec<f64>); // R^n
    fn observation_drift(&self, t: f64, x: &[f64], u: &[f64]) -> f64;

    // backward coefficients
    fn backward_driver(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ); // R^m
    fn backward_terminal(&self, x: &[f64], out: &mut Vec<f64>); // R^m

    // cost functions
    fn running_cost(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
    ) -> f64;
    fn terminal_cost(&self, x: &[f64]) -> f64;
    fn initial_cost(&self, y: &[f64]) -> f64;

    // derivatives of the forward coefficients
    fn drift_jac_state(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>); // n x n
    fn drift_jac_control(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>); // n x K
    fn diffusion_w_jac_state(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>);
    fn diffusion_w_jac_control(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>);
    fn diffusion_y_jac_state(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>);
    fn diffusion_y_jac_control(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>);
    fn jump_jac_state(&self, t: f64, x: &[f64], u: &[f64], mark: usize, out: &mut Vec<f64>);
    fn jump_jac_control(&self, t: f64, x: &[f64], u: &[f64], mark: usize, out: &mut Vec<f64>);
    fn observation_drift_grad_state(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>); // n
    fn observation_drift_grad_control(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>); // K

    // derivatives of the backward driver
    fn backward_driver_jac_state(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ); // m x n
    fn backward_driver_jac_y(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ); // m x m
    fn backward_driver_jac_z1(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ); // m x m
    fn backward_driver_jac_z2(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ); // m x m
    fn backward_driver_jac_lambda(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        mark: usize,
        out: &mut Vec<f64>,
    ); // m x m
    fn backward_driver_jac_control(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ); // m x K
    fn backward_terminal_jac(&self, x: &[f64], out: &mut Vec<f64>); // m x n

    // derivatives of the cost functions
    fn running_cost_grad_state(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ); // n
    fn running_cost_grad_y(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ); // m
    fn running_cost_grad_z1(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ); // m
    fn running_cost_grad_z2(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ); // m
    fn running_cost_grad_lambda(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        mark: usize,
        out: &mut Vec<f64>,
    ); // m
    fn running_cost_grad_control(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ); // K
    fn terminal_cost_grad(&self, x: &[f64], out: &mut Vec<f64>); // n
    fn initial_cost_grad(&self, y: &[f64], out: &mut Vec<f64>); // m
}

/// Full control problem: dimensions, horizon, initial state, mark space,
/// control box and coefficient bundle. Immutable after construction.
#[derive(Clone)]
pub struct ProblemSpec {
    pub state_dim: usize,
    pub backward_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub mark_space: MarkSpace,
    pub control_set: ControlSet,
    pub coefficients: Arc<dyn Coefficients>,
}

impl ProblemSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state_dim: usize,
        backward_dim: usize,
        horizon: f64,
        x0: Vec<f64>,
        mark_space: MarkSpace,
        control_set: ControlSet,
        coefficients: Arc<dyn Coefficients>,
    ) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if x0.len() != state_dim {
            return Err(Error::DimensionMismatch {
                evaluator: "x0".into(),
                expected: state_dim,
                got: x0.len(),
            });
        }
        Ok(ProblemSpec {
            state_dim,
            backward_dim,
            control_dim: control_set.dim(),
            horizon,
            x0,
            mark_space,
            control_set,
            coefficients,
        })
    }

    pub fn mark_count(&self) -> usize {
        self.mark_space.mark_count()
    }
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("state_dim", &self.state_dim)
            .field("backward_dim", &self.backward_dim)
            .field("control_dim", &self.control_dim)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("marks", &self.mark_space.weights)
            .finish()
    }
}

// ---------------------------------------------------------------------------
// Scalar convenience bundle (n = m = K = 1, at most one mark)
// ---------------------------------------------------------------------------

type ScalarFn = Box<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>; // (t, x, u)
type ScalarDriverFn = Box<dyn Fn(f64, f64, f64, f64, f64, f64, f64) -> f64 + Send + Sync>; // (t, x, y, z1, z2, lam, u)
type ScalarMapFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;

fn zero3() -> ScalarFn {
    Box::new(|_, _, _| 0.0)
}
fn zero7() -> ScalarDriverFn {
    Box::new(|_, _, _, _, _, _, _| 0.0)
}
fn zero1() -> ScalarMapFn {
    Box::new(|_| 0.0)
}

/// One-dimensional coefficient bundle assembled from closures; every slot
/// defaults to the zero function. Intended for bespoke test problems and
/// programmatic user bundles.
pub struct ScalarCoefficients {
    pub drift: ScalarFn,
    pub drift_dx: ScalarFn,
    pub drift_du: ScalarFn,
    pub diffusion_w: ScalarFn,
    pub diffusion_w_dx: ScalarFn,
    pub diffusion_w_du: ScalarFn,
    pub diffusion_y: ScalarFn,
    pub diffusion_y_dx: ScalarFn,
    pub diffusion_y_du: ScalarFn,
    pub jump: ScalarFn,
    pub jump_dx: ScalarFn,
    pub jump_du: ScalarFn,
    pub observation: ScalarFn,
    pub observation_dx: ScalarFn,
    pub observation_du: ScalarFn,
    pub driver: ScalarDriverFn,
    pub driver_dx: ScalarDriverFn,
    pub driver_dy: ScalarDriverFn,
    pub driver_dz1: ScalarDriverFn,
    pub driver_dz2: ScalarDriverFn,
    pub driver_dlam: ScalarDriverFn,
    pub driver_du: ScalarDriverFn,
    pub terminal_map: ScalarMapFn,
    pub terminal_map_dx: ScalarMapFn,
    pub run_cost: ScalarDriverFn,
    pub run_cost_dx: ScalarDriverFn,
    pub run_cost_dy: ScalarDriverFn,
    pub run_cost_dz1: ScalarDriverFn,
    pub run_cost_dz2: ScalarDriverFn,
    pub run_cost_dlam: ScalarDriverFn,
    pub run_cost_du: ScalarDriverFn,
    pub term_cost: ScalarMapFn,
    pub term_cost_dx: ScalarMapFn,
    pub init_cost: ScalarMapFn,
    pub init_cost_dy: ScalarMapFn,
}

impl Default for ScalarCoefficients {
    fn default() -> Self {
        ScalarCoefficients {
            drift: zero3(),
            drift_dx: zero3(),
            drift_du: zero3(),
            diffusion_w: zero3(),
            diffusion_w_dx: zero3(),
            diffusion_w_du: zero3(),
            diffusion_y: zero3(),
            diffusion_y_dx: zero3(),
            diffusion_y_du: zero3(),
            jump: zero3(),
            jump_dx: zero3(),
            jump_du: zero3(),
            observation: zero3(),
            observation_dx: zero3(),
            observation_du: zero3(),
            driver: zero7(),
            driver_dx: zero7(),
            driver_dy: zero7(),
            driver_dz1: zero7(),
            driver_dz2: zero7(),
            driver_dlam: zero7(),
            driver_du: zero7(),
            terminal_map: zero1(),
            terminal_map_dx: zero1(),
            run_cost: zero7(),
            run_cost_dx: zero7(),
            run_cost_dy: zero7(),
            run_cost_dz1: zero7(),
            run_cost_dz2: zero7(),
            run_cost_dlam: zero7(),
            run_cost_du: zero7(),
            term_cost: zero1(),
            term_cost_dx: zero1(),
            init_cost: zero1(),
            init_cost_dy: zero1(),
        }
    }
}

impl ScalarCoefficients {
    fn lam0(lambda: &[f64]) -> f64 {
        lambda.first().copied().unwrap_or(0.0)
    }
}

macro_rules! put {
    ($out:expr, $val:expr) => {{
        $out.clear();
        $out.push($val);
    }};
}

impl Coefficients for ScalarCoefficients {
    fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>) {
        put!(out, (self.drift)(t, x[0], u[0]));
    }
    fn diffusion_w(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>) {
        put!(out, (self.diffusion_w)(t, x[0], u[0]));
    }
    fn diffusion_y(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>) {
        put!(out, (self.diffusion_y)(t, x[0], u[0]));
    }
    fn jump_coeff(&self, t: f64, x: &[f64], u: &[f64], _mark: usize, out: &mut Vec<f64>) {
        put!(out, (self.jump)(t, x[0], u[0]));
    }
    fn observation_drift(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        (self.observation)(t, x[0], u[0])
    }
    fn backward_driver(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ) {
        put!(
            out,
            (self.driver)(t, x[0], y[0], z1[0], z2[0], Self::lam0(lambda), u[0])
        );
    }
    fn backward_terminal(&self, x: &[f64], out: &mut Vec<f64>) {
        put!(out, (self.terminal_map)(x[0]));
    }
    fn running_cost(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
    ) -> f64 {
        (self.run_cost)(t, x[0], y[0], z1[0], z2[0], Self::lam0(lambda), u[0])
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        (self.term_cost)(x[0])
    }
    fn initial_cost(&self, y: &[f64]) -> f64 {
        (self.init_cost)(y[0])
    }

    fn drift_jac_state(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>) {
        put!(out, (self.drift_dx)(t, x[0], u[0]));
    }
    fn drift_jac_control(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>) {
        put!(out, (self.drift_du)(t, x[0], u[0]));
    }
    fn diffusion_w_jac_state(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>) {
        put!(out, (self.diffusion_w_dx)(t, x[0], u[0]));
    }
    fn diffusion_w_jac_control(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>) {
        put!(out, (self.diffusion_w_du)(t, x[0], u[0]));
    }
    fn diffusion_y_jac_state(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>) {
        put!(out, (self.diffusion_y_dx)(t, x[0], u[0]));
    }
    fn diffusion_y_jac_control(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>) {
        put!(out, (self.diffusion_y_du)(t, x[0], u[0]));
    }
    fn jump_jac_state(&self, t: f64, x: &[f64], u: &[f64], _mark: usize, out: &mut Vec<f64>) {
        put!(out, (self.jump_dx)(t, x[0], u[0]));
    }
    fn jump_jac_control(&self, t: f64, x: &[f64], u: &[f64], _mark: usize, out: &mut Vec<f64>) {
        put!(out, (self.jump_du)(t, x[0], u[0]));
    }
    fn observation_drift_grad_state(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>) {
        put!(out, (self.observation_dx)(t, x[0], u[0]));
    }
    fn observation_drift_grad_control(&self, t: f64, x: &[f64], u: &[f64], out: &mut Vec<f64>) {
        put!(out, (self.observation_du)(t, x[0], u[0]));
    }

    fn backward_driver_jac_state(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ) {
        put!(
            out,
            (self.driver_dx)(t, x[0], y[0], z1[0], z2[0], Self::lam0(lambda), u[0])
        );
    }
    fn backward_driver_jac_y(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ) {
        put!(
            out,
            (self.driver_dy)(t, x[0], y[0], z1[0], z2[0], Self::lam0(lambda), u[0])
        );
    }
    fn backward_driver_jac_z1(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ) {
        put!(
            out,
            (self.driver_dz1)(t, x[0], y[0], z1[0], z2[0], Self::lam0(lambda), u[0])
        );
    }
    fn backward_driver_jac_z2(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ) {
        put!(
            out,
            (self.driver_dz2)(t, x[0], y[0], z1[0], z2[0], Self::lam0(lambda), u[0])
        );
    }
    fn backward_driver_jac_lambda(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        _mark: usize,
        out: &mut Vec<f64>,
    ) {
        put!(
            out,
            (self.driver_dlam)(t, x[0], y[0], z1[0], z2[0], Self::lam0(lambda), u[0])
        );
    }
    fn backward_driver_jac_control(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ) {
        put!(
            out,
            (self.driver_du)(t, x[0], y[0], z1[0], z2[0], Self::lam0(lambda), u[0])
        );
    }
    fn backward_terminal_jac(&self, x: &[f64], out: &mut Vec<f64>) {
        put!(out, (self.terminal_map_dx)(x[0]));
    }

    fn running_cost_grad_state(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ) {
        put!(
            out,
            (self.run_cost_dx)(t, x[0], y[0], z1[0], z2[0], Self::lam0(lambda), u[0])
        );
    }
    fn running_cost_grad_y(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ) {
        put!(
            out,
            (self.run_cost_dy)(t, x[0], y[0], z1[0], z2[0], Self::lam0(lambda), u[0])
        );
    }
    fn running_cost_grad_z1(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ) {
        put!(
            out,
            (self.run_cost_dz1)(t, x[0], y[0], z1[0], z2[0], Self::lam0(lambda), u[0])
        );
    }
    fn running_cost_grad_z2(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ) {
        put!(
            out,
            (self.run_cost_dz2)(t, x[0], y[0], z1[0], z2[0], Self::lam0(lambda), u[0])
        );
    }
    fn running_cost_grad_lambda(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        _mark: usize,
        out: &mut Vec<f64>,
    ) {
        put!(
            out,
            (self.run_cost_dlam)(t, x[0], y[0], z1[0], z2[0], Self::lam0(lambda), u[0])
        );
    }
    fn running_cost_grad_control(
        &self,
        t: f64,
        x: &[f64],
        y: &[f64],
        z1: &[f64],
        z2: &[f64],
        lambda: &[f64],
        u: &[f64],
        out: &mut Vec<f64>,
    ) {
        put!(
            out,
            (self.run_cost_du)(t, x[0], y[0], z1[0], z2[0], Self::lam0(lambda), u[0])
        );
    }
    fn terminal_cost_grad(&self, x: &[f64], out: &mut Vec<f64>) {
        put!(out, (self.term_cost_dx)(x[0]));
    }
    fn initial_cost_grad(&self, y: &[f64], out: &mut Vec<f64>) {
        put!(out, (self.init_cost_dy)(y[0]));
    }
}

/// Build a scalar problem spec from a [`ScalarCoefficients`] bundle.
pub fn scalar_problem(
    horizon: f64,
    x0: f64,
    mark_weight: Option<f64>,
    bounds: (f64, f64),
    coeffs: ScalarCoefficients,
) -> Result<ProblemSpec> {
    let mark_space = match mark_weight {
        Some(w) => MarkSpace::new(vec![w])?,
        None => MarkSpace::none(),
    };
    ProblemSpec::new(
        1,
        1,
        horizon,
        vec![x0],
        mark_space,
        ControlSet::new(vec![bounds.0], vec![bounds.1])?,
        Arc::new(coeffs),
    )
}

// ---------------------------------------------------------------------------
// Built-in linear-quadratic benchmark
// ---------------------------------------------------------------------------

/// Parameters of the scalar linear-quadratic benchmark problem.
///
/// Dynamics `dx = (a x + u) dt + c1 dW + c2 dW^u + jump_size dN~` with
/// constant observation drift `h0`, running cost `(qx x^2 + qu u^2) / 2`,
/// terminal cost `wT x^2 / 2`, backward terminal map `phi0 x` and zero
/// backward driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqParams {
    pub a: f64,
    pub c1: f64,
    pub c2: f64,
    pub jump_size: f64,
    pub jump_intensity: f64,
    pub qx: f64,
    pub qu: f64,
    pub terminal_weight: f64,
    pub h0: f64,
    pub phi0: f64,
    pub x0: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for LqParams {
    fn default() -> Self {
        LqParams {
            a: -1.0,
            c1: 0.3,
            c2: 0.2,
            jump_size: 0.25,
            jump_intensity: 0.5,
            qx: 1.0,
            qu: 1.0,
            terminal_weight: 0.3,
            h0: 0.5,
            phi0: 1.0,
            x0: 1.0,
            u_min: -5.0,
            u_max: 5.0,
        }
    }
}

/// Scalar LQ benchmark spec (`n = m = K = 1`, one jump mark).
pub fn builtin_lq_problem(params: LqParams) -> Result<ProblemSpec> {
    if params.qx < 0.0 || params.qu < 0.0 || params.terminal_weight < 0.0 {
        return Err(Error::InvalidArgument(
            "cost weights qx, qu, terminal_weight must be nonnegative".into(),
        ));
    }
    if params.jump_intensity < 0.0 {
        return Err(Error::InvalidArgument(
            "jump intensity must be nonnegative".into(),
        ));
    }
    let p = params;
    let coeffs = ScalarCoefficients {
        drift: Box::new(move |_, x, u| p.a * x + u),
        drift_dx: Box::new(move |_, _, _| p.a),
        drift_du: Box::new(|_, _, _| 1.0),
        diffusion_w: Box::new(move |_, _, _| p.c1),
        diffusion_y: Box::new(move |_, _, _| p.c2),
        jump: Box::new(move |_, _, _| p.jump_size),
        observation: Box::new(move |_, _, _| p.h0),
        terminal_map: Box::new(move |x| p.phi0 * x),
        terminal_map_dx: Box::new(move |_| p.phi0),
        run_cost: Box::new(move |_, x, _, _, _, _, u| 0.5 * (p.qx * x * x + p.qu * u * u)),
        run_cost_dx: Box::new(move |_, x, _, _, _, _, _| p.qx * x),
        run_cost_du: Box::new(move |_, _, _, _, _, _, u| p.qu * u),
        term_cost: Box::new(move |x| 0.5 * p.terminal_weight * x * x),
        term_cost_dx: Box::new(move |x| p.terminal_weight * x),
        ..Default::default()
    };
    scalar_problem(
        1.0, // horizon is owned by the grid; spec horizon re-set below
        p.x0,
        Some(p.jump_intensity),
        (p.u_min, p.u_max),
        coeffs,
    )
}

/// Same as [`builtin_lq_problem`] with an explicit horizon.
pub fn builtin_lq_problem_with_horizon(params: LqParams, horizon: f64) -> Result<ProblemSpec> {
    let mut spec = builtin_lq_problem(params)?;
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    spec.horizon = horizon;
    Ok(spec)
}

/// Problem selection as it appears in config files: a built-in bundle chosen
/// by name plus its parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub builtin: String,
    #[serde(default)]
    pub params: LqParams,
}

impl ProblemConfig {
    pub fn build(&self, horizon: f64) -> Result<ProblemSpec> {
        match self.builtin.as_str() {
            "lq" => builtin_lq_problem_with_horizon(self.params, horizon),
            other => Err(Error::InvalidArgument(format!(
                "unknown builtin problem `{other}` (available: lq)"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Sample-based validation of the standing assumptions
// ---------------------------------------------------------------------------

/// Outcome of one named validation check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub worst: f64,
    pub detail: String,
}

/// Full validation report; `checks` lists every check with its worst-case
/// observation.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Relative derivative-vs-finite-difference tolerance used by validation.
pub const DERIVATIVE_FD_TOL: f64 = 1e-5;
/// Growth ratio beyond which a bounded-group evaluator is flagged unbounded.
const GROWTH_FACTOR: f64 = 3.0;
const GROWTH_FLOOR: f64 = 1e-9;
const DEFAULT_SAMPLE_SCALE: f64 = 1.0;

#[derive(Clone)]
struct SamplePoint {
    t: f64,
    x: Vec<f64>,
    y: Vec<f64>,
    z1: Vec<f64>,
    z2: Vec<f64>,
    lambda: Vec<f64>,
    u: Vec<f64>,
}

fn draw_point(rng: &mut ChaCha12Rng, spec: &ProblemSpec, scale: f64) -> SamplePoint {
    fn draw(rng: &mut ChaCha12Rng, scale: f64, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
    }
    let n = spec.state_dim;
    let m = spec.backward_dim;
    let marks = spec.mark_count();
    let t = rng.gen_range(0.0..spec.horizon);
    let x = draw(rng, scale, n);
    let y = draw(rng, scale, m);
    let z1 = draw(rng, scale, m);
    let z2 = draw(rng, scale, m);
    let lambda = draw(rng, scale, m * marks);
    let mut u = draw(rng, scale, spec.control_dim);
    spec.control_set.project(&mut u);
    SamplePoint {
        t,
        x,
        y,
        z1,
        z2,
        lambda,
        u,
    }
}

enum ArgSlot {
    X,
    U,
    Y,
    Z1,
    Z2,
    Lambda,
}

impl ArgSlot {
    fn get<'a>(&self, pt: &'a mut SamplePoint) -> &'a mut Vec<f64> {
        match self {
            ArgSlot::X => &mut pt.x,
            ArgSlot::U => &mut pt.u,
            ArgSlot::Y => &mut pt.y,
            ArgSlot::Z1 => &mut pt.z1,
            ArgSlot::Z2 => &mut pt.z2,
            ArgSlot::Lambda => &mut pt.lambda,
        }
    }
}

struct Validator {
    points: Vec<SamplePoint>,
    wide_points: Vec<SamplePoint>,
    checks: Vec<CheckResult>,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

impl Validator {
    /// Dimension-and-finiteness probe of one evaluator at the first point.
    fn probe(
        &mut self,
        name: &'static str,
        expected: usize,
        eval: &dyn Fn(&SamplePoint, &mut Vec<f64>),
    ) -> Result<()> {
        let mut out = Vec::new();
        eval(&self.points[0], &mut out);
        if out.len() != expected {
            return Err(Error::DimensionMismatch {
                evaluator: name.into(),
                expected,
                got: out.len(),
            });
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCoefficient {
                evaluator: name.into(),
                context: format!("t = {}", self.points[0].t),
            });
        }
        self.checks.push(CheckResult {
            name: format!("{name} dimension"),
            passed: true,
            worst: expected as f64,
            detail: String::new(),
        });
        Ok(())
    }

    /// Compare an analytic Jacobian (out_dim x in_dim, row-major) against
    /// central finite differences of the value map in the given slot.
    fn check_jacobian(
        &mut self,
        name: String,
        out_dim: usize,
        slot: ArgSlot,
        value: &dyn Fn(&SamplePoint, &mut Vec<f64>),
        jac: &dyn Fn(&SamplePoint, &mut Vec<f64>),
    ) -> Result<()> {
        let mut worst = 0.0f64;
        let mut worst_detail = String::new();
        let mut analytic = Vec::new();
        let mut up = Vec::new();
        let mut down = Vec::new();
        for base in &self.points {
            let mut pt = base.clone();
            let in_dim = slot.get(&mut pt).len();
            jac(&pt, &mut analytic);
            if analytic.len() != out_dim * in_dim {
                return Err(Error::DimensionMismatch {
                    evaluator: name.clone(),
                    expected: out_dim * in_dim,
                    got: analytic.len(),
                });
            }
            if analytic.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteCoefficient {
                    evaluator: name.clone(),
                    context: format!("t = {}", pt.t),
                });
            }
            let saved = analytic.clone();
            for c in 0..in_dim {
                let x0 = slot.get(&mut pt)[c];
                let step = 5e-6 * (1.0 + x0.abs());
                slot.get(&mut pt)[c] = x0 + step;
                value(&pt, &mut up);
                slot.get(&mut pt)[c] = x0 - step;
                value(&pt, &mut down);
                slot.get(&mut pt)[c] = x0;
                for r in 0..out_dim {
                    let fd = (up[r] - down[r]) / (2.0 * step);
                    let err = rel_err(saved[r * in_dim + c], fd);
                    if err > worst {
                        worst = err;
                        worst_detail = format!(
                            "entry ({r},{c}) at t = {:.4}: analytic {} vs fd {}",
                            pt.t,
                            saved[r * in_dim + c],
                            fd
                        );
                    }
                }
            }
        }
        self.checks.push(CheckResult {
            name,
            passed: worst <= DERIVATIVE_FD_TOL,
            worst,
            detail: worst_detail,
        });
        Ok(())
    }

    /// Flag an evaluator whose sup-norm grows materially with the sampling
    /// scale; the bounded group of the standing assumptions must stay flat.
    fn check_bounded(&mut self, name: String, eval: &dyn Fn(&SamplePoint, &mut Vec<f64>)) {
        let mut out = Vec::new();
        let sup = |points: &[SamplePoint], out: &mut Vec<f64>| -> f64 {
            let mut s = 0.0f64;
            for pt in points {
                eval(pt, out);
                for v in out.iter() {
                    s = s.max(v.abs());
                }
            }
            s
        };
        let near = sup(&self.points, &mut out);
        let far = sup(&self.wide_points, &mut out);
        let passed = far <= GROWTH_FACTOR * near + GROWTH_FLOOR;
        self.checks.push(CheckResult {
            name: format!("{name} bounded"),
            passed,
            worst: far,
            detail: format!("sup at base scale {near}, sup at 10x scale {far}"),
        });
    }
}

/// Validate a problem spec against the standing assumptions at `samples`
/// random points. Dimension mismatches and non-finite outputs are hard
/// errors naming the evaluator; analytic-vs-finite-difference disagreements
/// and unbounded growth are reported as failed checks.
pub fn validate_spec(spec: &ProblemSpec, samples: usize, seed: u64) -> Result<ValidationReport> {
    if samples == 0 {
        return Err(Error::InvalidArgument(
            "validation needs at least one sample".into(),
        ));
    }
    let scale = DEFAULT_SAMPLE_SCALE;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x76616c6964617465);
    let points: Vec<SamplePoint> = (0..samples)
        .map(|_| draw_point(&mut rng, spec, scale))
        .collect();
    let wide_points: Vec<SamplePoint> = (0..samples)
        .map(|_| draw_point(&mut rng, spec, 10.0 * scale))
        .collect();
    let mut v = Validator {
        points,
        wide_points,
        checks: Vec::new(),
    };

    let n = spec.state_dim;
    let m = spec.backward_dim;
    let marks = spec.mark_count();
    let c = spec.coefficients.clone();

    // -- dimension probes ---------------------------------------------------
    {
        let cc = c.clone();
        v.probe("b", n, &move |p, out| cc.drift(p.t, &p.x, &p.u, out))?;
        let cc = c.clone();
        v.probe("sigma1", n, &move |p, out| {
            cc.diffusion_w(p.t, &p.x, &p.u, out)
        })?;
        let cc = c.clone();
        v.probe("sigma2", n, &move |p, out| {
            cc.diffusion_y(p.t, &p.x, &p.u, out)
        })?;
        for mark in 0..marks {
            let cc = c.clone();
            v.probe("g", n, &move |p, out| {
                cc.jump_coeff(p.t, &p.x, &p.u, mark, out)
            })?;
        }
        let cc = c.clone();
        v.probe("h", 1, &move |p, out| {
            out.clear();
            out.push(cc.observation_drift(p.t, &p.x, &p.u));
        })?;
        let cc = c.clone();
        v.probe("f", m, &move |p, out| {
            cc.backward_driver(p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u, out)
        })?;
        let cc = c.clone();
        v.probe("phi", m, &move |p, out| cc.backward_terminal(&p.x, out))?;
        let cc = c.clone();
        v.probe("l", 1, &move |p, out| {
            out.clear();
            out.push(cc.running_cost(p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u));
        })?;
        let cc = c.clone();
        v.probe("Phi", 1, &move |p, out| {
            out.clear();
            out.push(cc.terminal_cost(&p.x));
        })?;
        let cc = c.clone();
        v.probe("gamma", 1, &move |p, out| {
            out.clear();
            out.push(cc.initial_cost(&p.y));
        })?;
    }

    // -- derivative vs finite-difference checks ------------------------------
    macro_rules! jac_check {
        ($name:expr, $out_dim:expr, $slot:expr, $value:expr, $jac:expr) => {{
            let value = $value;
            let jac = $jac;
            v.check_jacobian($name.to_string(), $out_dim, $slot, &value, &jac)?;
        }};
    }

    {
        let cc = c.clone();
        let cj = c.clone();
        jac_check!(
            "b_x vs fd",
            n,
            ArgSlot::X,
            move |p: &SamplePoint, out: &mut Vec<f64>| cc.drift(p.t, &p.x, &p.u, out),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj.drift_jac_state(p.t, &p.x, &p.u, out)
        );
        let cc = c.clone();
        let cj = c.clone();
        jac_check!(
            "b_u vs fd",
            n,
            ArgSlot::U,
            move |p: &SamplePoint, out: &mut Vec<f64>| cc.drift(p.t, &p.x, &p.u, out),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj.drift_jac_control(p.t, &p.x, &p.u, out)
        );
        let cc = c.clone();
        let cj = c.clone();
        jac_check!(
            "sigma1_x vs fd",
            n,
            ArgSlot::X,
            move |p: &SamplePoint, out: &mut Vec<f64>| cc.diffusion_w(p.t, &p.x, &p.u, out),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .diffusion_w_jac_state(p.t, &p.x, &p.u, out)
        );
        let cc = c.clone();
        let cj = c.clone();
        jac_check!(
            "sigma1_u vs fd",
            n,
            ArgSlot::U,
            move |p: &SamplePoint, out: &mut Vec<f64>| cc.diffusion_w(p.t, &p.x, &p.u, out),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .diffusion_w_jac_control(p.t, &p.x, &p.u, out)
        );
        let cc = c.clone();
        let cj = c.clone();
        jac_check!(
            "sigma2_x vs fd",
            n,
            ArgSlot::X,
            move |p: &SamplePoint, out: &mut Vec<f64>| cc.diffusion_y(p.t, &p.x, &p.u, out),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .diffusion_y_jac_state(p.t, &p.x, &p.u, out)
        );
        let cc = c.clone();
        let cj = c.clone();
        jac_check!(
            "sigma2_u vs fd",
            n,
            ArgSlot::U,
            move |p: &SamplePoint, out: &mut Vec<f64>| cc.diffusion_y(p.t, &p.x, &p.u, out),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .diffusion_y_jac_control(p.t, &p.x, &p.u, out)
        );
        for mark in 0..marks {
            let cc = c.clone();
            let cj = c.clone();
            jac_check!(
                format!("g_x (mark {mark}) vs fd"),
                n,
                ArgSlot::X,
                move |p: &SamplePoint, out: &mut Vec<f64>| cc
                    .jump_coeff(p.t, &p.x, &p.u, mark, out),
                move |p: &SamplePoint, out: &mut Vec<f64>| cj
                    .jump_jac_state(p.t, &p.x, &p.u, mark, out)
            );
            let cc = c.clone();
            let cj = c.clone();
            jac_check!(
                format!("g_u (mark {mark}) vs fd"),
                n,
                ArgSlot::U,
                move |p: &SamplePoint, out: &mut Vec<f64>| cc
                    .jump_coeff(p.t, &p.x, &p.u, mark, out),
                move |p: &SamplePoint, out: &mut Vec<f64>| cj
                    .jump_jac_control(p.t, &p.x, &p.u, mark, out)
            );
        }
        let cc = c.clone();
        let cj = c.clone();
        jac_check!(
            "h_x vs fd",
            1,
            ArgSlot::X,
            move |p: &SamplePoint, out: &mut Vec<f64>| {
                out.clear();
                out.push(cc.observation_drift(p.t, &p.x, &p.u));
            },
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .observation_drift_grad_state(p.t, &p.x, &p.u, out)
        );
        let cc = c.clone();
        let cj = c.clone();
        jac_check!(
            "h_u vs fd",
            1,
            ArgSlot::U,
            move |p: &SamplePoint, out: &mut Vec<f64>| {
                out.clear();
                out.push(cc.observation_drift(p.t, &p.x, &p.u));
            },
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .observation_drift_grad_control(p.t, &p.x, &p.u, out)
        );

        let driver_value = |cc: Arc<dyn Coefficients>| {
            move |p: &SamplePoint, out: &mut Vec<f64>| {
                cc.backward_driver(p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u, out)
            }
        };
        let cj = c.clone();
        jac_check!(
            "f_x vs fd",
            m,
            ArgSlot::X,
            driver_value(c.clone()),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .backward_driver_jac_state(p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u, out)
        );
        let cj = c.clone();
        jac_check!(
            "f_y vs fd",
            m,
            ArgSlot::Y,
            driver_value(c.clone()),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .backward_driver_jac_y(p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u, out)
        );
        let cj = c.clone();
        jac_check!(
            "f_z1 vs fd",
            m,
            ArgSlot::Z1,
            driver_value(c.clone()),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .backward_driver_jac_z1(p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u, out)
        );
        let cj = c.clone();
        jac_check!(
            "f_z2 vs fd",
            m,
            ArgSlot::Z2,
            driver_value(c.clone()),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .backward_driver_jac_z2(p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u, out)
        );
        // per-mark driver derivative: assemble the full m x (m * marks)
        // Jacobian from the per-mark blocks to reuse the finite-difference
        // harness on the flattened lambda slot
        if marks > 0 {
            let cj = c.clone();
            jac_check!(
                "f_Lambda vs fd",
                m,
                ArgSlot::Lambda,
                driver_value(c.clone()),
                move |p: &SamplePoint, out: &mut Vec<f64>| {
                    let mut block = Vec::new();
                    out.clear();
                    out.resize(m * m * marks, 0.0);
                    for mark in 0..marks {
                        cj.backward_driver_jac_lambda(
                            p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u, mark, &mut block,
                        );
                        // block is m x m over components at this mark; lambda
                        // columns are component-major: col = comp * marks + mark
                        for r in 0..m {
                            for comp in 0..m {
                                out[r * (m * marks) + comp * marks + mark] =
                                    block[r * m + comp];
                            }
                        }
                    }
                }
            );
        }
        let cj = c.clone();
        jac_check!(
            "f_u vs fd",
            m,
            ArgSlot::U,
            driver_value(c.clone()),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .backward_driver_jac_control(p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u, out)
        );
        let cc = c.clone();
        let cj = c.clone();
        jac_check!(
            "phi_x vs fd",
            m,
            ArgSlot::X,
            move |p: &SamplePoint, out: &mut Vec<f64>| cc.backward_terminal(&p.x, out),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj.backward_terminal_jac(&p.x, out)
        );

        let cost_value = |cc: Arc<dyn Coefficients>| {
            move |p: &SamplePoint, out: &mut Vec<f64>| {
                out.clear();
                out.push(cc.running_cost(p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u));
            }
        };
        let cj = c.clone();
        jac_check!(
            "l_x vs fd",
            1,
            ArgSlot::X,
            cost_value(c.clone()),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .running_cost_grad_state(p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u, out)
        );
        let cj = c.clone();
        jac_check!(
            "l_y vs fd",
            1,
            ArgSlot::Y,
            cost_value(c.clone()),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .running_cost_grad_y(p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u, out)
        );
        let cj = c.clone();
        jac_check!(
            "l_z1 vs fd",
            1,
            ArgSlot::Z1,
            cost_value(c.clone()),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .running_cost_grad_z1(p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u, out)
        );
        let cj = c.clone();
        jac_check!(
            "l_z2 vs fd",
            1,
            ArgSlot::Z2,
            cost_value(c.clone()),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .running_cost_grad_z2(p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u, out)
        );
        if marks > 0 {
            let cj = c.clone();
            jac_check!(
                "l_Lambda vs fd",
                1,
                ArgSlot::Lambda,
                cost_value(c.clone()),
                move |p: &SamplePoint, out: &mut Vec<f64>| {
                    let mut block = Vec::new();
                    out.clear();
                    out.resize(m * marks, 0.0);
                    for mark in 0..marks {
                        cj.running_cost_grad_lambda(
                            p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u, mark, &mut block,
                        );
                        for comp in 0..m {
                            out[comp * marks + mark] = block[comp];
                        }
                    }
                }
            );
        }
        let cj = c.clone();
        jac_check!(
            "l_u vs fd",
            1,
            ArgSlot::U,
            cost_value(c.clone()),
            move |p: &SamplePoint, out: &mut Vec<f64>| cj
                .running_cost_grad_control(p.t, &p.x, &p.y, &p.z1, &p.z2, &p.lambda, &p.u, out)
        );
        let cc = c.clone();
        let cj = c.clone();
        jac_check!(
            "Phi_x vs fd",
            1,
            ArgSlot::X,
            move |p: &SamplePoint, out: &mut Vec<f64>| {
                out.clear();
                out.push(cc.terminal_cost(&p.x));
            },
            move |p: &SamplePoint, out: &mut Vec<f64>| cj.terminal_cost_grad(&p.x, out)
        );
        let cc = c.clone();
        let cj = c.clone();
        jac_check!(
            "gamma_y vs fd",
            1,
            ArgSlot::Y,
            move |p: &SamplePoint, out: &mut Vec<f64>| {
                out.clear();
                out.push(cc.initial_cost(&p.y));
            },
            move |p: &SamplePoint, out: &mut Vec<f64>| cj.initial_cost_grad(&p.y, out)
        );
    }

    // -- boundedness spot checks ---------------------------------------------
    {
        let cc = c.clone();
        v.check_bounded("h".into(), &move |p, out| {
            out.clear();
            out.push(cc.observation_drift(p.t, &p.x, &p.u));
        });
        let cc = c.clone();
        v.check_bounded("sigma2".into(), &move |p, out| {
            cc.diffusion_y(p.t, &p.x, &p.u, out)
        });
        let bounded_jacs: Vec<(
            &'static str,
            Box<dyn Fn(&SamplePoint, &mut Vec<f64>)>,
        )> = {
            let mut list: Vec<(&'static str, Box<dyn Fn(&SamplePoint, &mut Vec<f64>)>)> =
                Vec::new();
            let cc = c.clone();
            list.push((
                "b_x",
                Box::new(move |p, out| cc.drift_jac_state(p.t, &p.x, &p.u, out)),
            ));
            let cc = c.clone();
            list.push((
                "b_u",
                Box::new(move |p, out| cc.drift_jac_control(p.t, &p.x, &p.u, out)),
            ));
            let cc = c.clone();
            list.push((
                "sigma1_x",
                Box::new(move |p, out| cc.diffusion_w_jac_state(p.t, &p.x, &p.u, out)),
            ));
            let cc = c.clone();
            list.push((
                "sigma1_u",
                Box::new(move |p, out| cc.diffusion_w_jac_control(p.t, &p.x, &p.u, out)),
            ));
            let cc = c.clone();
            list.push((
                "sigma2_x",
                Box::new(move |p, out| cc.diffusion_y_jac_state(p.t, &p.x, &p.u, out)),
            ));
            let cc = c.clone();
            list.push((
                "sigma2_u",
                Box::new(move |p, out| cc.diffusion_y_jac_control(p.t, &p.x, &p.u, out)),
            ));
            let cc = c.clone();
            list.push((
                "h_x",
                Box::new(move |p, out| cc.observation_drift_grad_state(p.t, &p.x, &p.u, out)),
            ));
            let cc = c.clone();
            list.push((
                "h_u",
                Box::new(move |p, out| cc.observation_drift_grad_control(p.t, &p.x, &p.u, out)),
            ));
            let cc = c.clone();
            list.push((
                "phi_x",
                Box::new(move |p, out| cc.backward_terminal_jac(&p.x, out)),
            ));
            for mark in 0..marks {
                let cc = c.clone();
                list.push((
                    "g_x",
                    Box::new(move |p, out| cc.jump_jac_state(p.t, &p.x, &p.u, mark, out)),
                ));
                let cc = c.clone();
                list.push((
                    "g_u",
                    Box::new(move |p, out| cc.jump_jac_control(p.t, &p.x, &p.u, mark, out)),
                ));
            }
            list
        };
        for (name, eval) in &bounded_jacs {
            v.check_bounded((*name).into(), eval.as_ref());
        }
    }

    Ok(ValidationReport { checks: v.checks })
}
