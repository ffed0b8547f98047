//! Observation-adapted feedback controls: piecewise-constant-in-time affine
//! maps of observation-path features, projected onto the control box.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::ControlSet;

/// Which observation-path features feed the control map. The constant
/// feature is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyFeatures {
    pub current_y: bool,
    pub running_average: bool,
}

impl Default for PolicyFeatures {
    fn default() -> Self {
        PolicyFeatures {
            current_y: true,
            running_average: false,
        }
    }
}

impl PolicyFeatures {
    pub fn count(&self) -> usize {
        1 + usize::from(self.current_y) + usize::from(self.running_average)
    }

    /// Fill the feature vector from the observation history `y[0..=step]`.
    /// Features other than the constant are clamped to `clamp` in magnitude.
    pub fn fill(&self, y_history: &[f64], step: usize, clamp: f64, out: &mut [f64]) {
        debug_assert!(y_history.len() > step);
        let mut idx = 0;
        out[idx] = 1.0;
        idx += 1;
        if self.current_y {
            out[idx] = y_history[step].clamp(-clamp, clamp);
            idx += 1;
        }
        if self.running_average {
            let sum: f64 = y_history[..=step].iter().sum();
            out[idx] = (sum / (step + 1) as f64).clamp(-clamp, clamp);
            idx += 1;
        }
        debug_assert_eq!(idx, self.count());
    }
}

fn default_feature_clamp() -> f64 {
    1e6
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyData {
    features: PolicyFeatures,
    #[serde(default = "default_feature_clamp")]
    feature_clamp: f64,
    /// `[step][control component][feature]`
    theta: Vec<Vec<Vec<f64>>>,
}

/// Feedback policy `u_n = proj_U(theta_n . features(Y_{0..n}))` with one
/// coefficient block per grid step.
///
/// Feature clamping keeps the time integral of `|u|^4` finite for every
/// representable policy even when the control box is unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyData", into = "PolicyData")]
pub struct ControlPolicy {
    pub features: PolicyFeatures,
    pub feature_clamp: f64,
    /// `[n_steps, control_dim, feature_count]`
    pub theta: Array3<f64>,
}

impl From<ControlPolicy> for PolicyData {
    fn from(p: ControlPolicy) -> Self {
        let (n, k, f) = p.theta.dim();
        let theta = (0..n)
            .map(|i| {
                (0..k)
                    .map(|j| (0..f).map(|l| p.theta[[i, j, l]]).collect())
                    .collect()
            })
            .collect();
        PolicyData {
            features: p.features,
            feature_clamp: p.feature_clamp,
            theta,
        }
    }
}

impl TryFrom<PolicyData> for ControlPolicy {
    type Error = Error;

    fn try_from(d: PolicyData) -> Result<Self> {
        let n = d.theta.len();
        if n == 0 {
            return Err(Error::InvalidArgument("policy has no blocks".into()));
        }
        let k = d.theta[0].len();
        let f = d.theta[0].first().map_or(0, |r| r.len());
        if f != d.features.count() {
            return Err(Error::InvalidArgument(format!(
                "policy has {f} feature coefficients but the feature set needs {}",
                d.features.count()
            )));
        }
        let mut theta = Array3::zeros((n, k, f));
        for (i, block) in d.theta.iter().enumerate() {
            if block.len() != k {
                return Err(Error::InvalidArgument(format!(
                    "policy block {i} has {} control rows, expected {k}",
                    block.len()
                )));
            }
            for (j, row) in block.iter().enumerate() {
                if row.len() != f {
                    return Err(Error::InvalidArgument(format!(
                        "policy block {i} row {j} has {} coefficients, expected {f}",
                        row.len()
                    )));
                }
                for (l, &v) in row.iter().enumerate() {
                    theta[[i, j, l]] = v;
                }
            }
        }
        Ok(ControlPolicy {
            features: d.features,
            feature_clamp: d.feature_clamp,
            theta,
        })
    }
}

impl ControlPolicy {
    pub fn zero(n_steps: usize, control_dim: usize, features: PolicyFeatures) -> Self {
        ControlPolicy {
            features,
            feature_clamp: default_feature_clamp(),
            theta: Array3::zeros((n_steps, control_dim, features.count())),
        }
    }

    /// Constant (deterministic, open-loop) control `u0` at every step.
    pub fn constant(n_steps: usize, u0: &[f64], features: PolicyFeatures) -> Self {
        let mut p = Self::zero(n_steps, u0.len(), features);
        for n in 0..n_steps {
            for (k, &v) in u0.iter().enumerate() {
                p.theta[[n, k, 0]] = v;
            }
        }
        p
    }

    /// Scalar policy with a shared `(bias, gain_on_current_y)` block.
    pub fn scalar_affine(n_steps: usize, bias: f64, gain: f64) -> Self {
        let features = PolicyFeatures {
            current_y: true,
            running_average: false,
        };
        let mut p = Self::zero(n_steps, 1, features);
        for n in 0..n_steps {
            p.theta[[n, 0, 0]] = bias;
            p.theta[[n, 0, 1]] = gain;
        }
        p
    }

    pub fn n_steps(&self) -> usize {
        self.theta.dim().0
    }

    pub fn control_dim(&self) -> usize {
        self.theta.dim().1
    }

    /// `base + eps * (other - base)` in coefficient space.
    pub fn affine_combination(base: &Self, other: &Self, eps: f64) -> Self {
        assert_eq!(base.features, other.features, "feature sets must agree");
        assert_eq!(base.theta.dim(), other.theta.dim());
        ControlPolicy {
            features: base.features,
            feature_clamp: base.feature_clamp,
            theta: &base.theta + &(eps * (&other.theta - &base.theta)),
        }
    }

    /// Evaluate the control at `step` from the observation history
    /// `y_history[0..=step]`, projected onto the control box.
    pub fn evaluate(
        &self,
        control_set: &ControlSet,
        y_history: &[f64],
        step: usize,
        out: &mut [f64],
    ) {
        let (n_steps, k, f) = self.theta.dim();
        assert!(step < n_steps, "step {step} out of range {n_steps}");
        assert_eq!(out.len(), k);
        let clamp = if control_set.is_bounded() {
            f64::INFINITY
        } else {
            self.feature_clamp
        };
        let mut feat = [0.0f64; 8];
        debug_assert!(f <= 8);
        self.features.fill(y_history, step, clamp, &mut feat[..f]);
        for j in 0..k {
            let mut acc = 0.0;
            for l in 0..f {
                acc += self.theta[[step, j, l]] * feat[l];
            }
            out[j] = acc;
        }
        control_set.project(out);
    }
}

/// Evaluate a policy at one step of an observation history.
pub fn evaluate_policy(
    policy: &ControlPolicy,
    control_set: &ControlSet,
    y_history: &[f64],
    step: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; policy.control_dim()];
    policy.evaluate(control_set, y_history, step, &mut out);
    out
}
