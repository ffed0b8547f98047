//! The Hamiltonian pairing of system coefficients with adjoint variables and
//! its partial derivatives.
//!
//! The last adjoint slot is the *adjusted* scalar `r2_adj = R2 - sigma2' p -
//! z2' k` evaluated along the trajectory. Derivatives treat the raw `R2` as
//! fixed, so differentiating in `x`, `z2` or `u` picks up the substitution
//! terms (`-(sigma2_a' p) h` for `a` in `{x, u}`, `-k h` for `z2`).

use crate::error::{Error, Result};
use crate::problem::ProblemSpec;

/// Evaluation point: trajectory slots, adjoint slots and the adjusted scalar.
///
/// Layouts: `lambda` is `m x M` component-major (`lambda[j * M + i]`), `q3`
/// is `n x M` component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub lambda: Vec<f64>,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    pub q3: Vec<f64>,
    pub k: Vec<f64>,
    pub r2_adj: f64,
}

/// Differentiation slot of [`grad_h`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradSlot {
    State,
    Y,
    Z1,
    Z2,
    Lambda,
    Control,
}

impl GradSlot {
    pub const ALL: [GradSlot; 6] = [
        GradSlot::State,
        GradSlot::Y,
        GradSlot::Z1,
        GradSlot::Z2,
        GradSlot::Lambda,
        GradSlot::Control,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GradSlot::State => "x",
            GradSlot::Y => "y",
            GradSlot::Z1 => "z1",
            GradSlot::Z2 => "z2",
            GradSlot::Lambda => "Lambda",
            GradSlot::Control => "u",
        }
    }
}

/// Reusable coefficient-evaluation buffers for the kernels.
#[derive(Debug, Default)]
pub struct Workspace {
    vec_n: Vec<f64>,
    vec_m: Vec<f64>,
    jac: Vec<f64>,
    jac2: Vec<f64>,
}

/// Borrowed view of an evaluation point.
#[derive(Clone, Copy)]
pub struct PointRef<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z1: &'a [f64],
    pub z2: &'a [f64],
    pub lambda: &'a [f64],
    pub u: &'a [f64],
    pub p: &'a [f64],
    pub q1: &'a [f64],
    pub q2: &'a [f64],
    pub q3: &'a [f64],
    pub k: &'a [f64],
    pub r2_adj: f64,
}

impl HamiltonianPoint {
    pub fn as_ref(&self) -> PointRef<'_> {
        PointRef {
            t: self.t,
            x: &self.x,
            y: &self.y,
            z1: &self.z1,
            z2: &self.z2,
            lambda: &self.lambda,
            u: &self.u,
            p: &self.p,
            q1: &self.q1,
            q2: &self.q2,
            q3: &self.q3,
            k: &self.k,
            r2_adj: self.r2_adj,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adjusted last slot `r2 - sigma2(t, x, u)' p - z2' k`.
pub fn adjusted_r2(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    u: &[f64],
    z2: &[f64],
    p: &[f64],
    k: &[f64],
    raw_r2: f64,
    ws: &mut Workspace,
) -> f64 {
    spec.coefficients.diffusion_y(t, x, u, &mut ws.vec_n);
    raw_r2 - dot(&ws.vec_n, p) - dot(z2, k)
}

pub(crate) fn eval_kernel(spec: &ProblemSpec, pt: PointRef<'_>, ws: &mut Workspace) -> f64 {
    let c = spec.coefficients.as_ref();
    let marks = spec.mark_count();
    let n = spec.state_dim;
    let mut h_val =
        c.running_cost(pt.t, pt.x, pt.y, pt.z1, pt.z2, pt.lambda, pt.u);
    c.drift(pt.t, pt.x, pt.u, &mut ws.vec_n);
    h_val += dot(&ws.vec_n, pt.p);
    c.diffusion_w(pt.t, pt.x, pt.u, &mut ws.vec_n);
    h_val += dot(&ws.vec_n, pt.q1);
    c.diffusion_y(pt.t, pt.x, pt.u, &mut ws.vec_n);
    h_val += dot(&ws.vec_n, pt.q2);
    for i in 0..marks {
        let nu = spec.mark_space.weights[i];
        if nu == 0.0 {
            continue;
        }
        c.jump_coeff(pt.t, pt.x, pt.u, i, &mut ws.vec_n);
        let mut s = 0.0;
        for r in 0..n {
            s += ws.vec_n[r] * pt.q3[r * marks + i];
        }
        h_val += nu * s;
    }
    c.backward_driver(pt.t, pt.x, pt.y, pt.z1, pt.z2, pt.lambda, pt.u, &mut ws.vec_m);
    h_val += dot(&ws.vec_m, pt.k);
    h_val += pt.r2_adj * c.observation_drift(pt.t, pt.x, pt.u);
    h_val
}

pub(crate) fn grad_kernel(
    spec: &ProblemSpec,
    pt: PointRef<'_>,
    slot: GradSlot,
    out: &mut Vec<f64>,
    ws: &mut Workspace,
) {
    let c = spec.coefficients.as_ref();
    let n = spec.state_dim;
    let m = spec.backward_dim;
    let kdim = spec.control_dim;
    let marks = spec.mark_count();
    out.clear();
    match slot {
        GradSlot::State => {
            out.resize(n, 0.0);
            c.running_cost_grad_state(pt.t, pt.x, pt.y, pt.z1, pt.z2, pt.lambda, pt.u, &mut ws.jac);
            out.copy_from_slice(&ws.jac);
            let h = c.observation_drift(pt.t, pt.x, pt.u);
            // Jacobian' * vector accumulations
            c.drift_jac_state(pt.t, pt.x, pt.u, &mut ws.jac);
            for r in 0..n {
                for cc in 0..n {
                    out[cc] += ws.jac[r * n + cc] * pt.p[r];
                }
            }
            c.diffusion_w_jac_state(pt.t, pt.x, pt.u, &mut ws.jac);
            for r in 0..n {
                for cc in 0..n {
                    out[cc] += ws.jac[r * n + cc] * pt.q1[r];
                }
            }
            c.diffusion_y_jac_state(pt.t, pt.x, pt.u, &mut ws.jac);
            for r in 0..n {
                for cc in 0..n {
                    // q2 pairing plus the substitution term -(sigma2_x' p) h
                    out[cc] += ws.jac[r * n + cc] * (pt.q2[r] - h * pt.p[r]);
                }
            }
            for i in 0..marks {
                let nu = spec.mark_space.weights[i];
                if nu == 0.0 {
                    continue;
                }
                c.jump_jac_state(pt.t, pt.x, pt.u, i, &mut ws.jac);
                for r in 0..n {
                    let w = nu * pt.q3[r * marks + i];
                    for cc in 0..n {
                        out[cc] += ws.jac[r * n + cc] * w;
                    }
                }
            }
            c.backward_driver_jac_state(
                pt.t, pt.x, pt.y, pt.z1, pt.z2, pt.lambda, pt.u, &mut ws.jac,
            );
            for r in 0..m {
                for cc in 0..n {
                    out[cc] += ws.jac[r * n + cc] * pt.k[r];
                }
            }
            c.observation_drift_grad_state(pt.t, pt.x, pt.u, &mut ws.jac);
            for cc in 0..n {
                out[cc] += pt.r2_adj * ws.jac[cc];
            }
        }
        GradSlot::Y => {
            out.resize(m, 0.0);
            c.running_cost_grad_y(pt.t, pt.x, pt.y, pt.z1, pt.z2, pt.lambda, pt.u, &mut ws.jac);
            out.copy_from_slice(&ws.jac);
            c.backward_driver_jac_y(pt.t, pt.x, pt.y, pt.z1, pt.z2, pt.lambda, pt.u, &mut ws.jac);
            for r in 0..m {
                for cc in 0..m {
                    out[cc] += ws.jac[r * m + cc] * pt.k[r];
                }
            }
        }
        GradSlot::Z1 => {
            out.resize(m, 0.0);
            c.running_cost_grad_z1(pt.t, pt.x, pt.y, pt.z1, pt.z2, pt.lambda, pt.u, &mut ws.jac);
            out.copy_from_slice(&ws.jac);
            c.backward_driver_jac_z1(pt.t, pt.x, pt.y, pt.z1, pt.z2, pt.lambda, pt.u, &mut ws.jac);
            for r in 0..m {
                for cc in 0..m {
                    out[cc] += ws.jac[r * m + cc] * pt.k[r];
                }
            }
        }
        GradSlot::Z2 => {
            out.resize(m, 0.0);
            c.running_cost_grad_z2(pt.t, pt.x, pt.y, pt.z1, pt.z2, pt.lambda, pt.u, &mut ws.jac);
            out.copy_from_slice(&ws.jac);
            c.backward_driver_jac_z2(pt.t, pt.x, pt.y, pt.z1, pt.z2, pt.lambda, pt.u, &mut ws.jac);
            for r in 0..m {
                for cc in 0..m {
                    out[cc] += ws.jac[r * m + cc] * pt.k[r];
                }
            }
            // substitution term: r2_adj contains -z2' k
            let h = c.observation_drift(pt.t, pt.x, pt.u);
            for cc in 0..m {
                out[cc] -= pt.k[cc] * h;
            }
        }
        GradSlot::Lambda => {
            out.resize(m * marks, 0.0);
            for i in 0..marks {
                c.running_cost_grad_lambda(
                    pt.t, pt.x, pt.y, pt.z1, pt.z2, pt.lambda, pt.u, i, &mut ws.jac,
                );
                for cc in 0..m {
                    out[cc * marks + i] = ws.jac[cc];
                }
                c.backward_driver_jac_lambda(
                    pt.t, pt.x, pt.y, pt.z1, pt.z2, pt.lambda, pt.u, i, &mut ws.jac2,
                );
                for r in 0..m {
                    for cc in 0..m {
                        out[cc * marks + i] += ws.jac2[r * m + cc] * pt.k[r];
                    }
                }
            }
        }
        GradSlot::Control => {
            out.resize(kdim, 0.0);
            c.running_cost_grad_control(
                pt.t, pt.x, pt.y, pt.z1, pt.z2, pt.lambda, pt.u, &mut ws.jac,
            );
            out.copy_from_slice(&ws.jac);
            let h = c.observation_drift(pt.t, pt.x, pt.u);
            c.drift_jac_control(pt.t, pt.x, pt.u, &mut ws.jac);
            for r in 0..n {
                for cc in 0..kdim {
                    out[cc] += ws.jac[r * kdim + cc] * pt.p[r];
                }
            }
            c.diffusion_w_jac_control(pt.t, pt.x, pt.u, &mut ws.jac);
            for r in 0..n {
                for cc in 0..kdim {
                    out[cc] += ws.jac[r * kdim + cc] * pt.q1[r];
                }
            }
            c.diffusion_y_jac_control(pt.t, pt.x, pt.u, &mut ws.jac);
            for r in 0..n {
                for cc in 0..kdim {
                    out[cc] += ws.jac[r * kdim + cc] * (pt.q2[r] - h * pt.p[r]);
                }
            }
            for i in 0..marks {
                let nu = spec.mark_space.weights[i];
                if nu == 0.0 {
                    continue;
                }
                c.jump_jac_control(pt.t, pt.x, pt.u, i, &mut ws.jac);
                for r in 0..n {
                    let w = nu * pt.q3[r * marks + i];
                    for cc in 0..kdim {
                        out[cc] += ws.jac[r * kdim + cc] * w;
                    }
                }
            }
            c.backward_driver_jac_control(
                pt.t, pt.x, pt.y, pt.z1, pt.z2, pt.lambda, pt.u, &mut ws.jac,
            );
            for r in 0..m {
                for cc in 0..kdim {
                    out[cc] += ws.jac[r * kdim + cc] * pt.k[r];
                }
            }
            c.observation_drift_grad_control(pt.t, pt.x, pt.u, &mut ws.jac);
            for cc in 0..kdim {
                out[cc] += pt.r2_adj * ws.jac[cc];
            }
        }
    }
}

fn check_dims(spec: &ProblemSpec, pt: &HamiltonianPoint) -> Result<()> {
    let n = spec.state_dim;
    let m = spec.backward_dim;
    let marks = spec.mark_count();
    let expected: [(&str, usize, usize); 10] = [
        ("x", pt.x.len(), n),
        ("y", pt.y.len(), m),
        ("z1", pt.z1.len(), m),
        ("z2", pt.z2.len(), m),
        ("lambda", pt.lambda.len(), m * marks),
        ("u", pt.u.len(), spec.control_dim),
        ("p", pt.p.len(), n),
        ("q1", pt.q1.len(), n),
        ("q2", pt.q2.len(), n),
        ("q3", pt.q3.len(), n * marks),
    ];
    for (name, got, want) in expected {
        if got != want {
            return Err(Error::DimensionMismatch {
                evaluator: format!("HamiltonianPoint.{name}"),
                expected: want,
                got,
            });
        }
    }
    if pt.k.len() != m {
        return Err(Error::DimensionMismatch {
            evaluator: "HamiltonianPoint.k".into(),
            expected: m,
            got: pt.k.len(),
        });
    }
    Ok(())
}

/// Evaluate the Hamiltonian at a point.
pub fn eval_h(spec: &ProblemSpec, pt: &HamiltonianPoint) -> Result<f64> {
    check_dims(spec, pt)?;
    let mut ws = Workspace::default();
    let v = eval_kernel(spec, pt.as_ref(), &mut ws);
    if !v.is_finite() {
        return Err(Error::NonFiniteCoefficient {
            evaluator: "Hamiltonian".into(),
            context: format!("t = {}", pt.t),
        });
    }
    Ok(v)
}

/// Partial derivative of the Hamiltonian in the given slot (per-mark block
/// for the jump slot, component-major).
pub fn grad_h(spec: &ProblemSpec, pt: &HamiltonianPoint, slot: GradSlot) -> Result<Vec<f64>> {
    check_dims(spec, pt)?;
    let mut ws = Workspace::default();
    let mut out = Vec::new();
    grad_kernel(spec, pt.as_ref(), slot, &mut out, &mut ws);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCoefficient {
            evaluator: format!("Hamiltonian gradient ({})", slot.name()),
            context: format!("t = {}", pt.t),
        });
    }
    Ok(out)
}

/// Finite-difference comparison report.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_slot: String,
    pub points_checked: usize,
    /// strictly below the tolerance
    pub passed: bool,
}

fn slot_vec_mut<'a>(pt: &'a mut HamiltonianPoint, slot: GradSlot) -> &'a mut Vec<f64> {
    match slot {
        GradSlot::State => &mut pt.x,
        GradSlot::Y => &mut pt.y,
        GradSlot::Z1 => &mut pt.z1,
        GradSlot::Z2 => &mut pt.z2,
        GradSlot::Lambda => &mut pt.lambda,
        GradSlot::Control => &mut pt.u,
    }
}

/// Compare [`grad_h`] against central finite differences of [`eval_h`] in
/// every slot direction. The adjusted last argument is recomputed for each
/// perturbed point holding the raw `R2` fixed, so the substitution terms are
/// part of what the differences see.
pub fn finite_diff_check(
    spec: &ProblemSpec,
    points: &[HamiltonianPoint],
    tol: f64,
) -> Result<FiniteDiffReport> {
    let mut ws = Workspace::default();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut grad = Vec::new();
    for pt in points {
        check_dims(spec, pt)?;
        // recover the raw R2 carried by this point
        spec.coefficients
            .diffusion_y(pt.t, &pt.x, &pt.u, &mut ws.vec_n);
        let raw_r2 = pt.r2_adj + dot(&ws.vec_n, &pt.p) + dot(&pt.z2, &pt.k);
        for slot in GradSlot::ALL {
            grad_kernel(spec, pt.as_ref(), slot, &mut grad, &mut ws);
            let dim = grad.len();
            for c in 0..dim {
                let mut plus = pt.clone();
                let base = slot_vec_mut(&mut plus, slot)[c];
                let step = 5e-6 * (1.0 + base.abs());
                slot_vec_mut(&mut plus, slot)[c] = base + step;
                plus.r2_adj = adjusted_r2(
                    spec, plus.t, &plus.x, &plus.u, &plus.z2, &plus.p, &plus.k, raw_r2, &mut ws,
                );
                let up = eval_kernel(spec, plus.as_ref(), &mut ws);
                slot_vec_mut(&mut plus, slot)[c] = base - step;
                plus.r2_adj = adjusted_r2(
                    spec, plus.t, &plus.x, &plus.u, &plus.z2, &plus.p, &plus.k, raw_r2, &mut ws,
                );
                let down = eval_kernel(spec, plus.as_ref(), &mut ws);
                let fd = (up - down) / (2.0 * step);
                let rel = (grad[c] - fd).abs() / 1f64.max(grad[c].abs()).max(fd.abs());
                if rel > max_rel {
                    max_rel = rel;
                    worst = format!("{} component {c}", slot.name());
                }
            }
        }
    }
    Ok(FiniteDiffReport {
        max_rel_err: max_rel,
        worst_slot: worst,
        points_checked: points.len(),
        passed: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{builtin_lq_problem, LqParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn lq_spec() -> ProblemSpec {
        builtin_lq_problem(LqParams::default()).unwrap()
    }

    fn random_point(rng: &mut ChaCha12Rng, spec: &ProblemSpec) -> HamiltonianPoint {
        let marks = spec.mark_count();
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        HamiltonianPoint {
            t: rng.gen_range(0.0..spec.horizon),
            x: draw(spec.state_dim),
            y: draw(spec.backward_dim),
            z1: draw(spec.backward_dim),
            z2: draw(spec.backward_dim),
            lambda: draw(spec.backward_dim * marks),
            u: draw(spec.control_dim),
            p: draw(spec.state_dim),
            q1: draw(spec.state_dim),
            q2: draw(spec.state_dim),
            q3: draw(spec.state_dim * marks),
            k: draw(spec.backward_dim),
            r2_adj: rng.gen_range(-2.0..2.0),
        }
    }

    fn zero_adjoint_point(spec: &ProblemSpec, x: f64, u: f64) -> HamiltonianPoint {
        let marks = spec.mark_count();
        HamiltonianPoint {
            t: 0.3,
            x: vec![x],
            y: vec![0.0],
            z1: vec![0.0],
            z2: vec![0.0],
            lambda: vec![0.0; marks],
            u: vec![u],
            p: vec![0.0],
            q1: vec![0.0],
            q2: vec![0.0],
            q3: vec![0.0; marks],
            k: vec![0.0],
            r2_adj: 0.0,
        }
    }

    #[test]
    fn zero_adjoints_leave_only_running_cost() {
        let spec = lq_spec();
        let pt = zero_adjoint_point(&spec, 1.2, -0.4);
        let h = eval_h(&spec, &pt).unwrap();
        let l = 0.5 * (1.2f64.powi(2) + 0.4f64.powi(2));
        assert!((h - l).abs() < 1e-14);
    }

    #[test]
    fn lq_matches_hand_assembled_terms() {
        let spec = lq_spec();
        let prm = LqParams::default();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..20 {
            let pt = random_point(&mut rng, &spec);
            let h = eval_h(&spec, &pt).unwrap();
            let hand = 0.5 * (prm.qx * pt.x[0] * pt.x[0] + prm.qu * pt.u[0] * pt.u[0])
                + (prm.a * pt.x[0] + pt.u[0]) * pt.p[0]
                + prm.c1 * pt.q1[0]
                + prm.c2 * pt.q2[0]
                + prm.jump_size * pt.q3[0] * prm.jump_intensity
                + 0.0 * pt.k[0]
                + pt.r2_adj * prm.h0;
            assert!((h - hand).abs() < 1e-12, "H {h} vs hand {hand}");
        }
    }

    #[test]
    fn no_marks_drops_jump_term() {
        let spec = crate::problem::scalar_problem(
            1.0,
            0.0,
            None,
            (-1.0, 1.0),
            crate::problem::ScalarCoefficients {
                run_cost: Box::new(|_, x, _, _, _, _, _| x),
                run_cost_dx: Box::new(|_, _, _, _, _, _, _| 1.0),
                ..Default::default()
            },
        )
        .unwrap();
        let pt = HamiltonianPoint {
            t: 0.1,
            x: vec![2.0],
            y: vec![0.0],
            z1: vec![0.0],
            z2: vec![0.0],
            lambda: vec![],
            u: vec![0.0],
            p: vec![1.0],
            q1: vec![1.0],
            q2: vec![1.0],
            q3: vec![],
            k: vec![1.0],
            r2_adj: 1.0,
        };
        assert!((eval_h(&spec, &pt).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn zero_adjoints_gradient_in_u_is_cost_gradient() {
        let spec = lq_spec();
        let pt = zero_adjoint_point(&spec, 0.7, 0.9);
        let g = grad_h(&spec, &pt, GradSlot::Control).unwrap();
        assert!((g[0] - 0.9).abs() < 1e-14); // qu * u
    }

    #[test]
    fn gradients_match_finite_differences_on_lq() {
        let spec = lq_spec();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let points: Vec<_> = (0..100).map(|_| random_point(&mut rng, &spec)).collect();
        let report = finite_diff_check(&spec, &points, 1e-6).unwrap();
        assert!(
            report.passed,
            "max rel err {} at {}",
            report.max_rel_err, report.worst_slot
        );
    }

    #[test]
    fn substitution_terms_are_seen_by_finite_differences() {
        // sigma2 and h both control- and state-dependent, k nonzero:
        // exercises the -(sigma2_a' p) h and -k h substitution terms
        let coeffs = crate::problem::ScalarCoefficients {
            diffusion_y: Box::new(|_, x, u| 0.3 * x + 0.2 * u),
            diffusion_y_dx: Box::new(|_, _, _| 0.3),
            diffusion_y_du: Box::new(|_, _, _| 0.2),
            observation: Box::new(|_, x, u| 0.4 * x - 0.1 * u),
            observation_dx: Box::new(|_, _, _| 0.4),
            observation_du: Box::new(|_, _, _| -0.1),
            driver: Box::new(|_, x, y, z1, z2, lam, u| {
                0.2 * x - 0.3 * y + 0.15 * z1 + 0.25 * z2 + 0.1 * lam + 0.05 * u
            }),
            driver_dx: Box::new(|_, _, _, _, _, _, _| 0.2),
            driver_dy: Box::new(|_, _, _, _, _, _, _| -0.3),
            driver_dz1: Box::new(|_, _, _, _, _, _, _| 0.15),
            driver_dz2: Box::new(|_, _, _, _, _, _, _| 0.25),
            driver_dlam: Box::new(|_, _, _, _, _, _, _| 0.1),
            driver_du: Box::new(|_, _, _, _, _, _, _| 0.05),
            run_cost: Box::new(|_, x, y, _, _, _, u| 0.5 * (x * x + u * u) + 0.3 * x * y),
            run_cost_dx: Box::new(|_, x, y, _, _, _, _| x + 0.3 * y),
            run_cost_dy: Box::new(|_, x, _, _, _, _, _| 0.3 * x),
            run_cost_du: Box::new(|_, _, _, _, _, _, u| u),
            ..Default::default()
        };
        let spec =
            crate::problem::scalar_problem(1.0, 0.0, Some(0.8), (-3.0, 3.0), coeffs).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let points: Vec<_> = (0..50).map(|_| random_point(&mut rng, &spec)).collect();
        let report = finite_diff_check(&spec, &points, 1e-6).unwrap();
        assert!(
            report.passed,
            "max rel err {} at {}",
            report.max_rel_err, report.worst_slot
        );
    }

    #[test]
    fn hamiltonian_is_linear_in_each_adjoint_slot() {
        let spec = lq_spec();
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let base = random_point(&mut rng, &spec);
        let h0 = {
            let mut pt = base.clone();
            pt.p = vec![0.0];
            pt.q1 = vec![0.0];
            pt.q2 = vec![0.0];
            pt.q3 = vec![0.0];
            pt.k = vec![0.0];
            pt.r2_adj = 0.0;
            eval_h(&spec, &pt).unwrap()
        };
        // doubling one adjoint slot doubles that slot's contribution
        let slots: Vec<Box<dyn Fn(&mut HamiltonianPoint, f64)>> = vec![
            Box::new(|pt, s| pt.p[0] = s),
            Box::new(|pt, s| pt.q1[0] = s),
            Box::new(|pt, s| pt.q2[0] = s),
            Box::new(|pt, s| pt.q3[0] = s),
            Box::new(|pt, s| pt.k[0] = s),
            Box::new(|pt, s| pt.r2_adj = s),
        ];
        for set in &slots {
            let mut unit = base.clone();
            unit.p = vec![0.0];
            unit.q1 = vec![0.0];
            unit.q2 = vec![0.0];
            unit.q3 = vec![0.0];
            unit.k = vec![0.0];
            unit.r2_adj = 0.0;
            set(&mut unit, 1.0);
            let h1 = eval_h(&spec, &unit).unwrap();
            set(&mut unit, 2.0);
            let h2 = eval_h(&spec, &unit).unwrap();
            assert!(
                (h2 - h0 - 2.0 * (h1 - h0)).abs() < 1e-12,
                "slot contribution is not linear"
            );
        }
    }

    #[test]
    fn quadratic_cost_gives_exact_central_differences() {
        let spec = lq_spec();
        let pt = zero_adjoint_point(&spec, 0.5, 0.25);
        let report = finite_diff_check(&spec, &[pt], 1e-10).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn zero_tolerance_always_fails() {
        let spec = lq_spec();
        let pt = zero_adjoint_point(&spec, 0.0, 0.0);
        let report = finite_diff_check(&spec, &[pt], 0.0).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let spec = lq_spec();
        let mut pt = zero_adjoint_point(&spec, 0.0, 0.0);
        pt.p = vec![0.0, 0.0];
        assert!(eval_h(&spec, &pt).is_err());
    }
}
