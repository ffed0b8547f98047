//! Euler simulation of the forward components under the reference measure:
//! the state `x` (drift `b - sigma2 h`, drivers `W` and `Y`, compensated
//! jumps), the observation `Y` (a reference-measure Brownian motion) and the
//! change-of-measure density `rho` in exponential (positivity-preserving)
//! form.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::noise::{NoiseBundle, TimeGrid};
use crate::policy::ControlPolicy;
use crate::problem::ProblemSpec;

/// Sampled forward trajectories on the grid.
#[derive(Debug, Clone)]
pub struct ForwardPath {
    /// `[paths, N + 1, n]`
    pub x: Array3<f64>,
    /// `[paths, N + 1]`
    pub y_obs: Array2<f64>,
    /// `[paths, N + 1]`, positive, starts at 1
    pub rho: Array2<f64>,
    /// realized controls, `[paths, N, K]`
    pub u: Array3<f64>,
}

impl ForwardPath {
    pub fn path_count(&self) -> usize {
        self.x.dim().0
    }

    pub fn n_steps(&self) -> usize {
        self.u.dim().1
    }
}

fn check_consistency(
    spec: &ProblemSpec,
    policy: &ControlPolicy,
    noise: &NoiseBundle,
    grid: &TimeGrid,
) -> Result<()> {
    let n_steps = grid.n_steps;
    if noise.dw.dim().1 != n_steps {
        return Err(Error::InvalidArgument(format!(
            "noise bundle has {} steps, grid has {n_steps}",
            noise.dw.dim().1
        )));
    }
    if noise.jump_counts.dim().2 != spec.mark_count() {
        return Err(Error::InvalidArgument(format!(
            "noise bundle has {} marks, spec has {}",
            noise.jump_counts.dim().2,
            spec.mark_count()
        )));
    }
    if policy.n_steps() != n_steps {
        return Err(Error::InvalidArgument(format!(
            "policy has {} blocks, grid has {n_steps} steps",
            policy.n_steps()
        )));
    }
    if policy.control_dim() != spec.control_dim {
        return Err(Error::InvalidArgument(format!(
            "policy controls {} components, spec has {}",
            policy.control_dim(),
            spec.control_dim
        )));
    }
    Ok(())
}

/// Simulate all paths of the bundle under the given feedback policy.
///
/// Left-point explicit Euler with end-of-step jump aggregation:
/// `x_{n+1} = x_n + (b - sigma2 h) dt + sigma1 dW + sigma2 dY + sum_i g_i (dN_i - nu_i dt)`,
/// log-Euler for the density: `rho_{n+1} = rho_n exp(h dY - h^2 dt / 2)`.
pub fn simulate_forward(
    spec: &ProblemSpec,
    policy: &ControlPolicy,
    noise: &NoiseBundle,
    grid: &TimeGrid,
) -> Result<ForwardPath> {
    check_consistency(spec, policy, noise, grid)?;
    let paths = noise.path_count;
    let n_steps = grid.n_steps;
    let n = spec.state_dim;
    let k = spec.control_dim;
    let marks = spec.mark_count();
    let dt = grid.dt;
    let coeffs = spec.coefficients.as_ref();

    let mut x = Array3::zeros((paths, n_steps + 1, n));
    let mut y_obs = Array2::zeros((paths, n_steps + 1));
    let mut rho = Array2::zeros((paths, n_steps + 1));
    let mut u_out = Array3::zeros((paths, n_steps, k));

    let mut b = Vec::with_capacity(n);
    let mut s1 = Vec::with_capacity(n);
    let mut s2 = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    let mut x_cur = vec![0.0; n];
    let mut x_next = vec![0.0; n];
    let mut u_cur = vec![0.0; k];
    let mut y_hist = vec![0.0; n_steps + 1];

    for p in 0..paths {
        x_cur.copy_from_slice(&spec.x0);
        let mut rho_cur = 1.0;
        y_hist[0] = 0.0;
        for (i, &xv) in x_cur.iter().enumerate() {
            x[[p, 0, i]] = xv;
        }
        y_obs[[p, 0]] = 0.0;
        rho[[p, 0]] = 1.0;

        for step in 0..n_steps {
            let t = grid.node(step);
            policy.evaluate(&spec.control_set, &y_hist[..=step], step, &mut u_cur);
            for (j, &uv) in u_cur.iter().enumerate() {
                u_out[[p, step, j]] = uv;
            }

            coeffs.drift(t, &x_cur, &u_cur, &mut b);
            coeffs.diffusion_w(t, &x_cur, &u_cur, &mut s1);
            coeffs.diffusion_y(t, &x_cur, &u_cur, &mut s2);
            let h = coeffs.observation_drift(t, &x_cur, &u_cur);

            let dw = noise.dw[[p, step]];
            let dy = noise.dy[[p, step]];
            for i in 0..n {
                x_next[i] = x_cur[i] + (b[i] - s2[i] * h) * dt + s1[i] * dw + s2[i] * dy;
            }
            for mark in 0..marks {
                let nu = spec.mark_space.weights[mark];
                let compensated = noise.jump_counts[[p, step, mark]] - nu * dt;
                if compensated != 0.0 {
                    coeffs.jump_coeff(t, &x_cur, &u_cur, mark, &mut g);
                    for i in 0..n {
                        x_next[i] += g[i] * compensated;
                    }
                }
            }
            rho_cur *= (h * dy - 0.5 * h * h * dt).exp();
            let y_next = y_hist[step] + dy;

            if x_next.iter().any(|v| !v.is_finite()) || !rho_cur.is_finite() {
                return Err(Error::NonFiniteState { path: p, step });
            }

            for (i, &xv) in x_next.iter().enumerate() {
                x[[p, step + 1, i]] = xv;
            }
            y_obs[[p, step + 1]] = y_next;
            rho[[p, step + 1]] = rho_cur;
            y_hist[step + 1] = y_next;
            x_cur.copy_from_slice(&x_next);
        }
    }

    Ok(ForwardPath {
        x,
        y_obs,
        rho,
        u: u_out,
    })
}

/// Per-step mean of `rho` with its standard error, plus the martingale flag
/// `|mean - 1| <= 3 stderr` per step (trivially true at step 0).
pub fn density_martingale_summary(fwd: &ForwardPath) -> Vec<(f64, f64, bool)> {
    let (paths, n_nodes) = fwd.rho.dim();
    let mut out = Vec::with_capacity(n_nodes);
    for n in 0..n_nodes {
        let col = fwd.rho.column(n);
        let mean = col.sum() / paths as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (paths as f64 - 1.0);
        let stderr = (var / paths as f64).sqrt();
        let ok = (mean - 1.0).abs() <= 3.0 * stderr || stderr == 0.0 && (mean - 1.0).abs() == 0.0;
        out.push((mean, stderr, ok));
    }
    out
}
