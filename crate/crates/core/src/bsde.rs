//! Regression-based backward solvers: the state backward equation for
//! `(y, z1, z2, Lambda)`, the cost backward equation for `(r, R1, R2, R3)`
//! and the adjoint system for `(p, q1, q2, q3, k)`.
//!
//! All equations are integrated under the reference measure, where both
//! increment streams are Brownian; drifts stated against the controlled
//! Brownian motion pick up the `h`-correction (`dW^u = dY - h dt`).
//! Conditional expectations are least-squares projections on polynomial
//! features of `(x_n, Y_n)` (plus `k_n` in the adjoint stage);
//! integrand loadings come from increment regressions
//! (`z1 = E[y dW]/dt`, jump loadings from compensated counts).

use ndarray::{s, Array2, Array3, Array4};

use crate::error::{Error, Result};
use crate::forward::ForwardPath;
use crate::hamiltonian::{adjusted_r2, grad_kernel, GradSlot, PointRef, Workspace};
use crate::noise::{NoiseBundle, TimeGrid};
use crate::problem::ProblemSpec;
use crate::regression::{regress, BasisSpec, BasisVariables, PolyBasis};

/// Picard-iteration controls for the coupled adjoint solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardConfig {
    pub max_sweeps: usize,
    pub tol: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            max_sweeps: 8,
            tol: 1e-8,
        }
    }
}

/// Solution of the state backward equation.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    /// `[paths, N + 1, m]`
    pub y: Array3<f64>,
    /// `[paths, N, m]`
    pub z1: Array3<f64>,
    /// `[paths, N, m]`
    pub z2: Array3<f64>,
    /// `[paths, N, m, M]`
    pub lambda: Array4<f64>,
    /// per-step regression coefficient matrices
    pub step_coefficients: Vec<Array2<f64>>,
}

impl BsdeSolution {
    /// Initial backward value (constant across paths by construction).
    pub fn y0(&self) -> Vec<f64> {
        self.y.slice(s![0, 0, ..]).to_vec()
    }
}

/// Solution of the cost backward equation.
#[derive(Debug, Clone)]
pub struct CostBsdeSolution {
    /// `[paths, N + 1]`
    pub r: Array2<f64>,
    /// `[paths, N]`
    pub r1: Array2<f64>,
    /// `[paths, N]`
    pub r2: Array2<f64>,
    /// `[paths, N, M]`
    pub r3: Array3<f64>,
}

impl CostBsdeSolution {
    pub fn r0(&self) -> f64 {
        self.r[[0, 0]]
    }
}

/// Solution of the adjoint system.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    /// `[paths, N + 1, n]`
    pub p: Array3<f64>,
    /// `[paths, N, n]`
    pub q1: Array3<f64>,
    /// `[paths, N, n]`
    pub q2: Array3<f64>,
    /// `[paths, N, n, M]`
    pub q3: Array4<f64>,
    /// `[paths, N + 1, m]`
    pub k: Array3<f64>,
    /// sup-norm change of `(p, k)` per Picard sweep
    pub iteration_report: Vec<f64>,
}

/// Regression variable table at one step: selected state components, the
/// current observation value and (for the adjoint stage) the forward adjoint
/// component.
pub(crate) fn regression_vars(
    spec: &ProblemSpec,
    fwd: &ForwardPath,
    kvals: Option<&Array3<f64>>,
    step: usize,
    vars: &BasisVariables,
) -> Array2<f64> {
    let paths = fwd.path_count();
    let n = spec.state_dim;
    let m = spec.backward_dim;
    let with_k = vars.adjoint_k && kvals.is_some();
    let mut cols = 0;
    if vars.state {
        cols += n;
    }
    if vars.observation {
        cols += 1;
    }
    if with_k {
        cols += m;
    }
    let mut out = Array2::zeros((paths, cols));
    for p in 0..paths {
        let mut c = 0;
        if vars.state {
            for i in 0..n {
                out[[p, c]] = fwd.x[[p, step, i]];
                c += 1;
            }
        }
        if vars.observation {
            out[[p, c]] = fwd.y_obs[[p, step]];
            c += 1;
        }
        if with_k {
            let kv = kvals.unwrap();
            for j in 0..m {
                out[[p, c]] = kv[[p, step, j]];
                c += 1;
            }
        }
    }
    out
}

fn check_fwd(spec: &ProblemSpec, fwd: &ForwardPath, grid: &TimeGrid) -> Result<()> {
    if fwd.n_steps() != grid.n_steps {
        return Err(Error::InvalidArgument(format!(
            "forward pass has {} steps, grid has {}",
            fwd.n_steps(),
            grid.n_steps
        )));
    }
    if fwd.x.dim().2 != spec.state_dim {
        return Err(Error::InvalidArgument(format!(
            "forward pass carries state dim {}, spec has {}",
            fwd.x.dim().2,
            spec.state_dim
        )));
    }
    Ok(())
}

/// Backward recursion for `(y, z1, z2, Lambda)` with terminal condition
/// `y_N = phi(x_N)` and per-step update
/// `y_n = E[y_{n+1} | G_n] + (f - z2 h)(t_n, x_n, fitted values, u_n) dt`.
pub fn solve_state_bsde(
    spec: &ProblemSpec,
    fwd: &ForwardPath,
    noise: &NoiseBundle,
    grid: &TimeGrid,
    basis: &BasisSpec,
) -> Result<BsdeSolution> {
    check_fwd(spec, fwd, grid)?;
    basis.validate()?;
    let paths = fwd.path_count();
    let n_steps = grid.n_steps;
    let m = spec.backward_dim;
    let marks = spec.mark_count();
    let dt = grid.dt;
    let coeffs = spec.coefficients.as_ref();

    let mut y = Array3::zeros((paths, n_steps + 1, m));
    let mut z1 = Array3::zeros((paths, n_steps, m));
    let mut z2 = Array3::zeros((paths, n_steps, m));
    let mut lambda = Array4::zeros((paths, n_steps, m, marks));
    let mut step_coefficients = vec![Array2::zeros((0, 0)); n_steps];

    // terminal condition, exact per path
    let mut buf = Vec::with_capacity(m);
    for p in 0..paths {
        coeffs.backward_terminal(fwd.x.slice(s![p, n_steps, ..]).as_slice().unwrap(), &mut buf);
        for j in 0..m {
            y[[p, n_steps, j]] = buf[j];
        }
    }

    let n_targets = m * (3 + marks);
    let mut fbuf = Vec::new();
    let mut lam_buf = vec![0.0; m * marks];
    for step in (0..n_steps).rev() {
        let vars = regression_vars(spec, fwd, None, step, &basis.variables);
        let poly = PolyBasis::new(vars.dim().1, basis.degree);
        let design = poly.design_matrix(vars.view());

        let mut targets = Array2::zeros((paths, n_targets));
        for p in 0..paths {
            let dw = noise.dw[[p, step]];
            let dy = noise.dy[[p, step]];
            for j in 0..m {
                let ynext = y[[p, step + 1, j]];
                targets[[p, j]] = ynext;
                targets[[p, m + j]] = ynext * dw;
                targets[[p, 2 * m + j]] = ynext * dy;
                for i in 0..marks {
                    let nu = spec.mark_space.weights[i];
                    let comp = noise.jump_counts[[p, step, i]] - nu * dt;
                    targets[[p, 3 * m + j * marks + i]] = ynext * comp;
                }
            }
        }
        let reg = regress(design.view(), targets.view(), basis.ridge)?;

        let t = grid.node(step);
        for p in 0..paths {
            for j in 0..m {
                z1[[p, step, j]] = reg.fitted[[p, m + j]] / dt;
                z2[[p, step, j]] = reg.fitted[[p, 2 * m + j]] / dt;
                for i in 0..marks {
                    let nu = spec.mark_space.weights[i];
                    let v = if nu > 0.0 {
                        reg.fitted[[p, 3 * m + j * marks + i]] / (nu * dt)
                    } else {
                        0.0
                    };
                    lambda[[p, step, j, i]] = v;
                    lam_buf[j * marks + i] = v;
                }
            }
            let x_slice = fwd.x.slice(s![p, step, ..]);
            let u_slice = fwd.u.slice(s![p, step, ..]);
            let ey = reg.fitted.slice(s![p, 0..m]);
            let z1_slice = z1.slice(s![p, step, ..]);
            let z2_slice = z2.slice(s![p, step, ..]);
            coeffs.backward_driver(
                t,
                x_slice.as_slice().unwrap(),
                ey.as_slice().unwrap(),
                z1_slice.as_slice().unwrap(),
                z2_slice.as_slice().unwrap(),
                &lam_buf,
                u_slice.as_slice().unwrap(),
                &mut fbuf,
            );
            let h = coeffs.observation_drift(
                t,
                x_slice.as_slice().unwrap(),
                u_slice.as_slice().unwrap(),
            );
            for j in 0..m {
                let v = reg.fitted[[p, j]] + (fbuf[j] - z2[[p, step, j]] * h) * dt;
                if !v.is_finite() {
                    return Err(Error::NonFiniteState { path: p, step });
                }
                y[[p, step, j]] = v;
            }
        }
        step_coefficients[step] = reg.coefficients;
    }

    Ok(BsdeSolution {
        y,
        z1,
        z2,
        lambda,
        step_coefficients,
    })
}

/// Backward recursion for the cost equation: terminal `r_N = Phi(x_N)`,
/// update `r_n = E[r_{n+1} | G_n] + (l + R2 h) dt` with the running cost
/// evaluated at the state-equation solution.
pub fn solve_cost_bsde(
    spec: &ProblemSpec,
    fwd: &ForwardPath,
    state: &BsdeSolution,
    noise: &NoiseBundle,
    grid: &TimeGrid,
    basis: &BasisSpec,
) -> Result<CostBsdeSolution> {
    check_fwd(spec, fwd, grid)?;
    basis.validate()?;
    let paths = fwd.path_count();
    let n_steps = grid.n_steps;
    let marks = spec.mark_count();
    let dt = grid.dt;
    let coeffs = spec.coefficients.as_ref();

    let mut r = Array2::zeros((paths, n_steps + 1));
    let mut r1 = Array2::zeros((paths, n_steps));
    let mut r2 = Array2::zeros((paths, n_steps));
    let mut r3 = Array3::zeros((paths, n_steps, marks));

    for p in 0..paths {
        r[[p, n_steps]] =
            coeffs.terminal_cost(fwd.x.slice(s![p, n_steps, ..]).as_slice().unwrap());
    }

    let n_targets = 3 + marks;
    for step in (0..n_steps).rev() {
        let vars = regression_vars(spec, fwd, None, step, &basis.variables);
        let poly = PolyBasis::new(vars.dim().1, basis.degree);
        let design = poly.design_matrix(vars.view());

        let mut targets = Array2::zeros((paths, n_targets));
        for p in 0..paths {
            let rnext = r[[p, step + 1]];
            targets[[p, 0]] = rnext;
            targets[[p, 1]] = rnext * noise.dw[[p, step]];
            targets[[p, 2]] = rnext * noise.dy[[p, step]];
            for i in 0..marks {
                let nu = spec.mark_space.weights[i];
                let comp = noise.jump_counts[[p, step, i]] - nu * dt;
                targets[[p, 3 + i]] = rnext * comp;
            }
        }
        let reg = regress(design.view(), targets.view(), basis.ridge)?;

        let t = grid.node(step);
        for p in 0..paths {
            r1[[p, step]] = reg.fitted[[p, 1]] / dt;
            let r2v = reg.fitted[[p, 2]] / dt;
            r2[[p, step]] = r2v;
            for i in 0..marks {
                let nu = spec.mark_space.weights[i];
                r3[[p, step, i]] = if nu > 0.0 {
                    reg.fitted[[p, 3 + i]] / (nu * dt)
                } else {
                    0.0
                };
            }
            let x_slice = fwd.x.slice(s![p, step, ..]);
            let u_slice = fwd.u.slice(s![p, step, ..]);
            let lam_slice = state.lambda.slice(s![p, step, .., ..]);
            let l = coeffs.running_cost(
                t,
                x_slice.as_slice().unwrap(),
                state.y.slice(s![p, step, ..]).as_slice().unwrap(),
                state.z1.slice(s![p, step, ..]).as_slice().unwrap(),
                state.z2.slice(s![p, step, ..]).as_slice().unwrap(),
                lam_slice.to_slice().unwrap(),
                u_slice.as_slice().unwrap(),
            );
            let h = coeffs.observation_drift(
                t,
                x_slice.as_slice().unwrap(),
                u_slice.as_slice().unwrap(),
            );
            let v = reg.fitted[[p, 0]] + (l + r2v * h) * dt;
            if !v.is_finite() {
                return Err(Error::NonFiniteState { path: p, step });
            }
            r[[p, step]] = v;
        }
    }

    Ok(CostBsdeSolution { r, r1, r2, r3 })
}

/// Solve the coupled adjoint system by Picard sweeps.
///
/// Each sweep integrates `k` forward from `k_0 = -gamma_y(y_0)` with drift
/// `-H_y + H_z2 h` and loadings `-H_z1`, `-H_z2`, `-H_Lambda` (taking
/// `(p, q)` from the previous sweep), then solves `p` backward from
/// `p_N = Phi_x(x_N) - phi_x' k_N` with drift correction `q2 h`. Sweeps stop
/// when the sup-norm change of `(p, k)` drops below `picard.tol`.
#[allow(clippy::too_many_arguments)]
pub fn solve_adjoint(
    spec: &ProblemSpec,
    fwd: &ForwardPath,
    state: &BsdeSolution,
    cost: &CostBsdeSolution,
    noise: &NoiseBundle,
    grid: &TimeGrid,
    basis: &BasisSpec,
    picard: PicardConfig,
) -> Result<AdjointSolution> {
    check_fwd(spec, fwd, grid)?;
    basis.validate()?;
    if picard.max_sweeps == 0 {
        return Err(Error::InvalidArgument("need at least one sweep".into()));
    }
    let paths = fwd.path_count();
    let n_steps = grid.n_steps;
    let n = spec.state_dim;
    let m = spec.backward_dim;
    let marks = spec.mark_count();
    let dt = grid.dt;
    let coeffs = spec.coefficients.as_ref();

    let mut p_prev = Array3::zeros((paths, n_steps + 1, n));
    let mut q1_prev = Array3::zeros((paths, n_steps, n));
    let mut q2_prev = Array3::zeros((paths, n_steps, n));
    let mut q3_prev = Array4::zeros((paths, n_steps, n, marks));
    let mut k_prev = Array3::zeros((paths, n_steps + 1, m));
    let mut residuals = Vec::new();

    let mut ws = Workspace::default();
    let mut grad = Vec::new();
    let mut grad_z1 = Vec::new();
    let mut grad_z2 = Vec::new();
    let mut grad_lam = Vec::new();
    let mut buf_m = Vec::with_capacity(m);
    let mut buf_jac = Vec::new();

    // initial backward value is path-constant; gamma_y(y_0) computed once
    let y0 = state.y0();
    let mut k0 = Vec::with_capacity(m);
    coeffs.initial_cost_grad(&y0, &mut k0);

    for _sweep in 0..picard.max_sweeps {
        // ---- forward pass for k --------------------------------------------
        let mut k_new: Array3<f64> = Array3::zeros((paths, n_steps + 1, m));
        for p in 0..paths {
            for j in 0..m {
                k_new[[p, 0, j]] = -k0[j];
            }
            for step in 0..n_steps {
                let t = grid.node(step);
                let x_s = fwd.x.slice(s![p, step, ..]);
                let u_s = fwd.u.slice(s![p, step, ..]);
                let k_s = k_new.slice(s![p, step, ..]).to_vec();
                let z2_s = state.z2.slice(s![p, step, ..]);
                let r2_adj = adjusted_r2(
                    spec,
                    t,
                    x_s.as_slice().unwrap(),
                    u_s.as_slice().unwrap(),
                    z2_s.as_slice().unwrap(),
                    p_prev.slice(s![p, step, ..]).as_slice().unwrap(),
                    &k_s,
                    cost.r2[[p, step]],
                    &mut ws,
                );
                let pt = PointRef {
                    t,
                    x: x_s.as_slice().unwrap(),
                    y: state.y.slice(s![p, step, ..]).as_slice().unwrap(),
                    z1: state.z1.slice(s![p, step, ..]).as_slice().unwrap(),
                    z2: z2_s.as_slice().unwrap(),
                    lambda: state.lambda.slice(s![p, step, .., ..]).to_slice().unwrap(),
                    u: u_s.as_slice().unwrap(),
                    p: p_prev.slice(s![p, step, ..]).as_slice().unwrap(),
                    q1: q1_prev.slice(s![p, step, ..]).as_slice().unwrap(),
                    q2: q2_prev.slice(s![p, step, ..]).as_slice().unwrap(),
                    q3: q3_prev.slice(s![p, step, .., ..]).to_slice().unwrap(),
                    k: &k_s,
                    r2_adj,
                };
                grad_kernel(spec, pt, GradSlot::Y, &mut grad, &mut ws);
                grad_kernel(spec, pt, GradSlot::Z1, &mut grad_z1, &mut ws);
                grad_kernel(spec, pt, GradSlot::Z2, &mut grad_z2, &mut ws);
                grad_kernel(spec, pt, GradSlot::Lambda, &mut grad_lam, &mut ws);
                let h = coeffs.observation_drift(
                    t,
                    x_s.as_slice().unwrap(),
                    u_s.as_slice().unwrap(),
                );
                let dw = noise.dw[[p, step]];
                let dy = noise.dy[[p, step]];
                for j in 0..m {
                    let mut v = k_s[j] + (-grad[j] + grad_z2[j] * h) * dt
                        - grad_z1[j] * dw
                        - grad_z2[j] * dy;
                    for i in 0..marks {
                        let nu = spec.mark_space.weights[i];
                        let comp = noise.jump_counts[[p, step, i]] - nu * dt;
                        v -= grad_lam[j * marks + i] * comp;
                    }
                    if !v.is_finite() {
                        return Err(Error::NonFiniteState { path: p, step });
                    }
                    k_new[[p, step + 1, j]] = v;
                }
            }
        }

        // ---- backward pass for p -------------------------------------------
        let mut p_new = Array3::zeros((paths, n_steps + 1, n));
        let mut q1_new = Array3::zeros((paths, n_steps, n));
        let mut q2_new = Array3::zeros((paths, n_steps, n));
        let mut q3_new = Array4::zeros((paths, n_steps, n, marks));
        for p in 0..paths {
            let x_t = fwd.x.slice(s![p, n_steps, ..]);
            coeffs.terminal_cost_grad(x_t.as_slice().unwrap(), &mut buf_m);
            let phi_x = {
                coeffs.backward_terminal_jac(x_t.as_slice().unwrap(), &mut buf_jac);
                buf_jac.clone()
            };
            for c in 0..n {
                let mut v = buf_m[c];
                for rj in 0..m {
                    v -= phi_x[rj * n + c] * k_new[[p, n_steps, rj]];
                }
                p_new[[p, n_steps, c]] = v;
            }
        }

        let n_targets = n * (3 + marks);
        for step in (0..n_steps).rev() {
            let vars = regression_vars(spec, fwd, Some(&k_new), step, &basis.variables);
            let poly = PolyBasis::new(vars.dim().1, basis.degree);
            let design = poly.design_matrix(vars.view());

            let mut targets = Array2::zeros((paths, n_targets));
            for p in 0..paths {
                let dw = noise.dw[[p, step]];
                let dy = noise.dy[[p, step]];
                for c in 0..n {
                    let pnext = p_new[[p, step + 1, c]];
                    targets[[p, c]] = pnext;
                    targets[[p, n + c]] = pnext * dw;
                    targets[[p, 2 * n + c]] = pnext * dy;
                    for i in 0..marks {
                        let nu = spec.mark_space.weights[i];
                        let comp = noise.jump_counts[[p, step, i]] - nu * dt;
                        targets[[p, 3 * n + c * marks + i]] = pnext * comp;
                    }
                }
            }
            let reg = regress(design.view(), targets.view(), basis.ridge)?;

            let t = grid.node(step);
            let mut ep = vec![0.0; n];
            let mut q1v = vec![0.0; n];
            let mut q2v = vec![0.0; n];
            let mut q3v = vec![0.0; n * marks];
            for p in 0..paths {
                for c in 0..n {
                    ep[c] = reg.fitted[[p, c]];
                    q1v[c] = reg.fitted[[p, n + c]] / dt;
                    q2v[c] = reg.fitted[[p, 2 * n + c]] / dt;
                    for i in 0..marks {
                        let nu = spec.mark_space.weights[i];
                        q3v[c * marks + i] = if nu > 0.0 {
                            reg.fitted[[p, 3 * n + c * marks + i]] / (nu * dt)
                        } else {
                            0.0
                        };
                    }
                }
                let x_s = fwd.x.slice(s![p, step, ..]);
                let u_s = fwd.u.slice(s![p, step, ..]);
                let z2_s = state.z2.slice(s![p, step, ..]);
                let k_s = k_new.slice(s![p, step, ..]);
                let r2_adj = adjusted_r2(
                    spec,
                    t,
                    x_s.as_slice().unwrap(),
                    u_s.as_slice().unwrap(),
                    z2_s.as_slice().unwrap(),
                    &ep,
                    k_s.as_slice().unwrap(),
                    cost.r2[[p, step]],
                    &mut ws,
                );
                let pt = PointRef {
                    t,
                    x: x_s.as_slice().unwrap(),
                    y: state.y.slice(s![p, step, ..]).as_slice().unwrap(),
                    z1: state.z1.slice(s![p, step, ..]).as_slice().unwrap(),
                    z2: z2_s.as_slice().unwrap(),
                    lambda: state.lambda.slice(s![p, step, .., ..]).to_slice().unwrap(),
                    u: u_s.as_slice().unwrap(),
                    p: &ep,
                    q1: &q1v,
                    q2: &q2v,
                    q3: &q3v,
                    k: k_s.as_slice().unwrap(),
                    r2_adj,
                };
                grad_kernel(spec, pt, GradSlot::State, &mut grad, &mut ws);
                let h = coeffs.observation_drift(
                    t,
                    x_s.as_slice().unwrap(),
                    u_s.as_slice().unwrap(),
                );
                for c in 0..n {
                    let v = ep[c] + (grad[c] + q2v[c] * h) * dt;
                    if !v.is_finite() {
                        return Err(Error::NonFiniteState { path: p, step });
                    }
                    p_new[[p, step, c]] = v;
                    q1_new[[p, step, c]] = q1v[c];
                    q2_new[[p, step, c]] = q2v[c];
                    for i in 0..marks {
                        q3_new[[p, step, c, i]] = q3v[c * marks + i];
                    }
                }
            }
        }

        // ---- sweep residual --------------------------------------------------
        let mut res = 0.0f64;
        for (&a, &b) in p_new.iter().zip(p_prev.iter()) {
            res = res.max((a - b).abs());
        }
        for (&a, &b) in k_new.iter().zip(k_prev.iter()) {
            res = res.max((a - b).abs());
        }
        residuals.push(res);

        p_prev = p_new;
        q1_prev = q1_new;
        q2_prev = q2_new;
        q3_prev = q3_new;
        k_prev = k_new;

        if res <= picard.tol {
            return Ok(AdjointSolution {
                p: p_prev,
                q1: q1_prev,
                q2: q2_prev,
                q3: q3_prev,
                k: k_prev,
                iteration_report: residuals,
            });
        }
    }

    Err(Error::PicardNonConvergence {
        sweeps: picard.max_sweeps,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::simulate_forward;
    use crate::noise::{make_grid, sample_noise};
    use crate::policy::{ControlPolicy, PolicyFeatures};
    use crate::problem::{scalar_problem, ScalarCoefficients};

    fn mean_and_stderr(vals: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
        let n = vals.clone().count() as f64;
        let mean = vals.clone().sum::<f64>() / n;
        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    /// dx = sigma1 dW, y(T) = x(T): martingale representation gives
    /// y_0 = x0, z1 = sigma1, z2 = Lambda = 0.
    #[test]
    fn diffusion_martingale_representation() {
        let sigma = 0.4;
        let coeffs = ScalarCoefficients {
            diffusion_w: Box::new(move |_, _, _| sigma),
            terminal_map: Box::new(|x| x),
            terminal_map_dx: Box::new(|_| 1.0),
            ..Default::default()
        };
        let spec = scalar_problem(1.0, 0.7, None, (-1.0, 1.0), coeffs).unwrap();
        let grid = make_grid(1.0, 25).unwrap();
        let paths = 20_000;
        let noise = sample_noise(&grid, &spec.mark_space, paths, 42).unwrap();
        let policy = ControlPolicy::zero(25, 1, PolicyFeatures::default());
        let fwd = simulate_forward(&spec, &policy, &noise, &grid).unwrap();
        let sol = solve_state_bsde(&spec, &fwd, &noise, &grid, &BasisSpec::default()).unwrap();

        // y_0 vs x0, with the raw step-0 target spread as the noise scale
        let y0 = sol.y[[0, 0, 0]];
        let (_, se) = mean_and_stderr((0..paths).map(|p| sol.y[[p, 1, 0]]));
        assert!(
            (y0 - 0.7).abs() <= 3.0 * se.max(1e-4),
            "y0 {y0} vs 0.7 (se {se})"
        );

        // pooled z1 against sigma1
        let mid = 12;
        let (z1m, z1se) = mean_and_stderr((0..paths).map(|p| sol.z1[[p, mid, 0]]));
        let (_, z1raw_se) = mean_and_stderr(
            (0..paths).map(|p| sol.y[[p, mid + 1, 0]] * noise.dw[[p, mid]] / grid.dt),
        );
        assert!(
            (z1m - sigma).abs() <= 3.0 * z1se.max(z1raw_se),
            "z1 {z1m} vs {sigma}"
        );
        let (z2m, z2se) = mean_and_stderr((0..paths).map(|p| sol.z2[[p, mid, 0]]));
        let (_, z2raw_se) = mean_and_stderr(
            (0..paths).map(|p| sol.y[[p, mid + 1, 0]] * noise.dy[[p, mid]] / grid.dt),
        );
        assert!(z2m.abs() <= 3.0 * z2se.max(z2raw_se), "z2 {z2m} vs 0");
    }

    /// f constant, phi = 0, h = 0: y_n = c (T - t_n) exactly.
    #[test]
    fn deterministic_driver_is_exact() {
        let c = 0.8;
        let coeffs = ScalarCoefficients {
            driver: Box::new(move |_, _, _, _, _, _, _| c),
            ..Default::default()
        };
        let spec = scalar_problem(1.0, 0.0, None, (-1.0, 1.0), coeffs).unwrap();
        let grid = make_grid(1.0, 20).unwrap();
        let noise = sample_noise(&grid, &spec.mark_space, 500, 3).unwrap();
        let policy = ControlPolicy::zero(20, 1, PolicyFeatures::default());
        let fwd = simulate_forward(&spec, &policy, &noise, &grid).unwrap();
        let sol = solve_state_bsde(&spec, &fwd, &noise, &grid, &BasisSpec::default()).unwrap();
        for step in 0..=20 {
            let want = c * (1.0 - grid.node(step));
            for p in 0..500 {
                assert!(
                    (sol.y[[p, step, 0]] - want).abs() < 1e-8,
                    "step {step}: {} vs {want}",
                    sol.y[[p, step, 0]]
                );
            }
        }
    }

    /// dx = g dN~ (pure jump), y(T) = x(T): jump martingale representation
    /// gives Lambda = g.
    #[test]
    fn pure_jump_martingale_representation() {
        let jump = 0.3;
        let coeffs = ScalarCoefficients {
            jump: Box::new(move |_, _, _| jump),
            terminal_map: Box::new(|x| x),
            terminal_map_dx: Box::new(|_| 1.0),
            ..Default::default()
        };
        let spec = scalar_problem(1.0, 0.5, Some(1.0), (-1.0, 1.0), coeffs).unwrap();
        let grid = make_grid(1.0, 25).unwrap();
        let paths = 20_000;
        let noise = sample_noise(&grid, &spec.mark_space, paths, 7).unwrap();
        let policy = ControlPolicy::zero(25, 1, PolicyFeatures::default());
        let fwd = simulate_forward(&spec, &policy, &noise, &grid).unwrap();
        let sol = solve_state_bsde(&spec, &fwd, &noise, &grid, &BasisSpec::default()).unwrap();

        let mid = 12;
        let nu_dt = 1.0 * grid.dt;
        let (lm, lse) = mean_and_stderr((0..paths).map(|p| sol.lambda[[p, mid, 0, 0]]));
        let (_, lraw_se) = mean_and_stderr((0..paths).map(|p| {
            sol.y[[p, mid + 1, 0]] * (noise.jump_counts[[p, mid, 0]] - nu_dt) / nu_dt
        }));
        assert!(
            (lm - jump).abs() <= 3.0 * lse.max(lraw_se),
            "Lambda {lm} vs {jump}"
        );
        let y0 = sol.y[[0, 0, 0]];
        let (_, yse) = mean_and_stderr((0..paths).map(|p| sol.y[[p, 1, 0]]));
        assert!((y0 - 0.5).abs() <= 3.0 * yse.max(1e-4), "y0 {y0}");
    }

    #[test]
    fn frozen_dynamics_cost_equation_is_constant() {
        // l = 0, Phi = x^2, frozen dynamics: r_n = x0^2 exactly
        let coeffs = ScalarCoefficients {
            term_cost: Box::new(|x| x * x),
            term_cost_dx: Box::new(|x| 2.0 * x),
            ..Default::default()
        };
        let spec = scalar_problem(1.0, 1.3, None, (-1.0, 1.0), coeffs).unwrap();
        let grid = make_grid(1.0, 10).unwrap();
        let noise = sample_noise(&grid, &spec.mark_space, 200, 5).unwrap();
        let policy = ControlPolicy::zero(10, 1, PolicyFeatures::default());
        let fwd = simulate_forward(&spec, &policy, &noise, &grid).unwrap();
        let state = solve_state_bsde(&spec, &fwd, &noise, &grid, &BasisSpec::default()).unwrap();
        let cost =
            solve_cost_bsde(&spec, &fwd, &state, &noise, &grid, &BasisSpec::default()).unwrap();
        let want = 1.3 * 1.3;
        for p in 0..200 {
            for n in 0..=10 {
                assert!((cost.r[[p, n]] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn unit_running_cost_integrates_to_horizon() {
        let coeffs = ScalarCoefficients {
            run_cost: Box::new(|_, _, _, _, _, _, _| 1.0),
            ..Default::default()
        };
        let spec = scalar_problem(1.0, 0.0, None, (-1.0, 1.0), coeffs).unwrap();
        let grid = make_grid(1.0, 40).unwrap();
        let noise = sample_noise(&grid, &spec.mark_space, 100, 9).unwrap();
        let policy = ControlPolicy::zero(40, 1, PolicyFeatures::default());
        let fwd = simulate_forward(&spec, &policy, &noise, &grid).unwrap();
        let state = solve_state_bsde(&spec, &fwd, &noise, &grid, &BasisSpec::default()).unwrap();
        let cost =
            solve_cost_bsde(&spec, &fwd, &state, &noise, &grid, &BasisSpec::default()).unwrap();
        assert!((cost.r0() - 1.0).abs() < 1e-8, "r0 {}", cost.r0());
    }

    #[test]
    fn decoupled_adjoint_converges_in_one_sweep() {
        // f and l independent of (y, z1, z2, Lambda), gamma = 0:
        // k stays 0 and the first sweep is already the fixed point
        let coeffs = ScalarCoefficients {
            drift: Box::new(|_, x, u| -x + u),
            drift_dx: Box::new(|_, _, _| -1.0),
            drift_du: Box::new(|_, _, _| 1.0),
            diffusion_w: Box::new(|_, _, _| 0.3),
            run_cost: Box::new(|_, x, _, _, _, _, u| 0.5 * (x * x + u * u)),
            run_cost_dx: Box::new(|_, x, _, _, _, _, _| x),
            run_cost_du: Box::new(|_, _, _, _, _, _, u| u),
            term_cost: Box::new(|x| 0.5 * x * x),
            term_cost_dx: Box::new(|x| x),
            ..Default::default()
        };
        let spec = scalar_problem(1.0, 1.0, None, (-5.0, 5.0), coeffs).unwrap();
        let grid = make_grid(1.0, 15).unwrap();
        let noise = sample_noise(&grid, &spec.mark_space, 2_000, 13).unwrap();
        let policy = ControlPolicy::scalar_affine(15, 0.1, 0.0);
        let fwd = simulate_forward(&spec, &policy, &noise, &grid).unwrap();
        let basis = BasisSpec::default();
        let state = solve_state_bsde(&spec, &fwd, &noise, &grid, &basis).unwrap();
        let cost = solve_cost_bsde(&spec, &fwd, &state, &noise, &grid, &basis).unwrap();
        let adj = solve_adjoint(
            &spec,
            &fwd,
            &state,
            &cost,
            &noise,
            &grid,
            &basis,
            PicardConfig::default(),
        )
        .unwrap();
        assert!(adj.k.iter().all(|&v| v == 0.0), "k must stay zero");
        assert_eq!(adj.iteration_report.len(), 2);
        assert!(adj.iteration_report[1] <= 1e-12, "second sweep must be a no-op");
        // terminal condition reduces to Phi_x(x_N)
        for p in 0..50 {
            let want = fwd.x[[p, 15, 0]];
            assert!((adj.p[[p, 15, 0]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_dynamics_costate_integrates_cost_gradient() {
        // all coefficients zero except l = x and Phi = x^2/2:
        // H_x = 1, p_n = Phi_x(x0) + (T - t_n)
        let coeffs = ScalarCoefficients {
            run_cost: Box::new(|_, x, _, _, _, _, _| x),
            run_cost_dx: Box::new(|_, _, _, _, _, _, _| 1.0),
            term_cost: Box::new(|x| 0.5 * x * x),
            term_cost_dx: Box::new(|x| x),
            ..Default::default()
        };
        let spec = scalar_problem(1.0, 0.6, None, (-1.0, 1.0), coeffs).unwrap();
        let grid = make_grid(1.0, 10).unwrap();
        let noise = sample_noise(&grid, &spec.mark_space, 100, 3).unwrap();
        let policy = ControlPolicy::zero(10, 1, PolicyFeatures::default());
        let fwd = simulate_forward(&spec, &policy, &noise, &grid).unwrap();
        let basis = BasisSpec::default();
        let state = solve_state_bsde(&spec, &fwd, &noise, &grid, &basis).unwrap();
        let cost = solve_cost_bsde(&spec, &fwd, &state, &noise, &grid, &basis).unwrap();
        let adj = solve_adjoint(
            &spec,
            &fwd,
            &state,
            &cost,
            &noise,
            &grid,
            &basis,
            PicardConfig::default(),
        )
        .unwrap();
        for n in 0..=10 {
            let want = 0.6 + (1.0 - grid.node(n));
            for p in 0..20 {
                assert!(
                    (adj.p[[p, n, 0]] - want).abs() < 1e-9,
                    "p at step {n}: {} vs {want}",
                    adj.p[[p, n, 0]]
                );
            }
        }
    }

    #[test]
    fn martingale_reconstruction_improves_with_degree() {
        let spec = crate::problem::builtin_lq_problem(crate::problem::LqParams::default()).unwrap();
        let grid = make_grid(1.0, 20).unwrap();
        let noise = sample_noise(&grid, &spec.mark_space, 4_000, 19).unwrap();
        let policy = ControlPolicy::scalar_affine(20, 0.2, 0.3);
        let fwd = simulate_forward(&spec, &policy, &noise, &grid).unwrap();

        let residual_for_degree = |degree: usize| -> f64 {
            let basis = BasisSpec {
                degree,
                ..Default::default()
            };
            let sol = solve_state_bsde(&spec, &fwd, &noise, &grid, &basis).unwrap();
            let coeffs = spec.coefficients.as_ref();
            let mut fbuf = Vec::new();
            let mut total = 0.0;
            let mut count = 0;
            for p in 0..4_000 {
                for step in 0..20 {
                    let t = grid.node(step);
                    let lam = sol.lambda[[p, step, 0, 0]];
                    coeffs.backward_driver(
                        t,
                        &[fwd.x[[p, step, 0]]],
                        &[sol.y[[p, step, 0]]],
                        &[sol.z1[[p, step, 0]]],
                        &[sol.z2[[p, step, 0]]],
                        &[lam],
                        &[fwd.u[[p, step, 0]]],
                        &mut fbuf,
                    );
                    let h = coeffs.observation_drift(
                        t,
                        &[fwd.x[[p, step, 0]]],
                        &[fwd.u[[p, step, 0]]],
                    );
                    let drift = (fbuf[0] - sol.z2[[p, step, 0]] * h) * grid.dt;
                    let nu_dt = spec.mark_space.weights[0] * grid.dt;
                    let reconstructed = sol.y[[p, step, 0]] - drift
                        + sol.z1[[p, step, 0]] * noise.dw[[p, step]]
                        + sol.z2[[p, step, 0]] * noise.dy[[p, step]]
                        + lam * (noise.jump_counts[[p, step, 0]] - nu_dt);
                    total += (reconstructed - sol.y[[p, step + 1, 0]]).powi(2);
                    count += 1;
                }
            }
            total / count as f64
        };

        let r0 = residual_for_degree(0);
        let r1 = residual_for_degree(1);
        let r2 = residual_for_degree(2);
        assert!(
            r1 <= r0 * 1.0001 + 1e-12 && r2 <= r1 * 1.0001 + 1e-12,
            "residuals must not increase with degree: {r0} {r1} {r2}"
        );
        assert!(r1 < r0, "degree 1 should strictly beat degree 0 on LQ");
    }
}
