//! Ridge-regularized least squares on polynomial features, the
//! conditional-expectation workhorse of the backward solvers.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which state variables enter the regression features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisVariables {
    /// state components `x`
    pub state: bool,
    /// current observation value `Y`
    pub observation: bool,
    /// forward adjoint component `k` (adjoint stage only)
    pub adjoint_k: bool,
}

impl Default for BasisVariables {
    fn default() -> Self {
        BasisVariables {
            state: true,
            observation: true,
            adjoint_k: false,
        }
    }
}

/// Polynomial regression basis: total degree and ridge weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisSpec {
    pub degree: usize,
    pub variables: BasisVariables,
    pub ridge: f64,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            degree: 2,
            variables: BasisVariables::default(),
            ridge: 1e-8,
        }
    }
}

impl BasisSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ridge < 0.0 || !self.ridge.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ridge must be nonnegative, got {}",
                self.ridge
            )));
        }
        Ok(())
    }
}

/// All monomial exponent tuples over `num_vars` variables with total degree
/// at most `degree`, constant first, graded order.
pub fn monomial_exponents(num_vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; num_vars]];
    for d in 1..=degree {
        let mut stack = vec![(Vec::<u32>::new(), d as u32)];
        while let Some((prefix, rem)) = stack.pop() {
            if prefix.len() == num_vars {
                if rem == 0 {
                    out.push(prefix);
                }
                continue;
            }
            let slots_left = num_vars - prefix.len();
            for e in (0..=rem).rev() {
                if slots_left == 1 && e != rem {
                    continue;
                }
                let mut next = prefix.clone();
                next.push(e);
                stack.push((next, rem - e));
            }
        }
    }
    out.sort();
    out.sort_by_key(|m| m.iter().sum::<u32>());
    out
}

/// Polynomial feature map for a fixed variable count.
#[derive(Debug, Clone)]
pub struct PolyBasis {
    pub exponents: Vec<Vec<u32>>,
    pub num_vars: usize,
}

impl PolyBasis {
    pub fn new(num_vars: usize, degree: usize) -> Self {
        PolyBasis {
            exponents: monomial_exponents(num_vars, degree),
            num_vars,
        }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn eval(&self, vars: &[f64], out: &mut [f64]) {
        debug_assert_eq!(vars.len(), self.num_vars);
        debug_assert_eq!(out.len(), self.exponents.len());
        for (j, expo) in self.exponents.iter().enumerate() {
            let mut v = 1.0;
            for (i, &e) in expo.iter().enumerate() {
                for _ in 0..e {
                    v *= vars[i];
                }
            }
            out[j] = v;
        }
    }

    /// Feature matrix `[rows, features]` from a row-major variable table.
    pub fn design_matrix(&self, vars: ArrayView2<f64>) -> Array2<f64> {
        let rows = vars.dim().0;
        let mut m = Array2::zeros((rows, self.len()));
        let mut buf = vec![0.0; self.len()];
        for r in 0..rows {
            self.eval(vars.row(r).as_slice().unwrap(), &mut buf);
            for (j, &v) in buf.iter().enumerate() {
                m[[r, j]] = v;
            }
        }
        m
    }
}

/// Least-squares fit: raw-space coefficients `[features, targets]` plus an
/// explicit intercept per target, and fitted values `[rows, targets]`.
#[derive(Debug, Clone)]
pub struct Regression {
    pub coefficients: Array2<f64>,
    pub intercepts: Vec<f64>,
    pub fitted: Array2<f64>,
}

impl Regression {
    /// Evaluate the fit at a new feature row.
    pub fn predict(&self, features: &[f64], out: &mut [f64]) {
        let (nf, nd) = self.coefficients.dim();
        debug_assert_eq!(features.len(), nf);
        debug_assert_eq!(out.len(), nd);
        for d in 0..nd {
            let mut acc = self.intercepts[d];
            for j in 0..nf {
                acc += self.coefficients[[j, d]] * features[j];
            }
            out[d] = acc;
        }
    }
}

/// In-place Cholesky solve of the symmetric positive-definite system
/// `G X = B`; fails when a pivot collapses.
fn cholesky_solve(g: &mut Array2<f64>, b: &mut Array2<f64>) -> Result<()> {
    let n = g.dim().0;
    let d = b.dim().1;
    let max_diag = (0..n).map(|i| g[[i, i]].abs()).fold(0.0f64, f64::max);
    let tol = 1e-12 * max_diag.max(1e-300);
    for i in 0..n {
        for j in 0..i {
            let mut s = g[[i, j]];
            for l in 0..j {
                s -= g[[i, l]] * g[[j, l]];
            }
            g[[i, j]] = s / g[[j, j]];
        }
        let mut s = g[[i, i]];
        for l in 0..i {
            s -= g[[i, l]] * g[[i, l]];
        }
        if s <= tol {
            return Err(Error::RankDeficient);
        }
        g[[i, i]] = s.sqrt();
    }
    // forward substitution L Z = B
    for c in 0..d {
        for i in 0..n {
            let mut s = b[[i, c]];
            for l in 0..i {
                s -= g[[i, l]] * b[[l, c]];
            }
            b[[i, c]] = s / g[[i, i]];
        }
        // back substitution L^T X = Z
        for i in (0..n).rev() {
            let mut s = b[[i, c]];
            for l in (i + 1)..n {
                s -= g[[l, i]] * b[[l, c]];
            }
            b[[i, c]] = s / g[[i, i]];
        }
    }
    Ok(())
}

const DROP_STD_TOL: f64 = 1e-12;

/// Ridge-regularized least squares of `targets` on `features`.
///
/// Columns are centered and scaled before solving (the ridge acts in the
/// standardized geometry and does not penalize the intercept); constant and
/// numerically collapsed columns are dropped from the solve and receive a
/// zero slope. With `ridge = 0` a rank-deficient system is an error advising
/// a positive ridge.
pub fn regress(
    features: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    ridge: f64,
) -> Result<Regression> {
    let (rows, nf) = features.dim();
    let (trows, nd) = targets.dim();
    if trows != rows {
        return Err(Error::InvalidArgument(format!(
            "feature rows {rows} != target rows {trows}"
        )));
    }
    if rows <= nf {
        return Err(Error::InvalidArgument(format!(
            "need more samples than features, got {rows} samples for {nf} features"
        )));
    }
    if ridge < 0.0 {
        return Err(Error::InvalidArgument("ridge must be nonnegative".into()));
    }

    let rows_f = rows as f64;
    let mut mean = vec![0.0; nf];
    let mut std = vec![0.0; nf];
    for j in 0..nf {
        let col = features.column(j);
        let mu = col.sum() / rows_f;
        let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / rows_f;
        mean[j] = mu;
        std[j] = var.sqrt();
    }
    let kept: Vec<usize> = (0..nf)
        .filter(|&j| std[j] > DROP_STD_TOL * (1.0 + mean[j].abs()))
        .collect();
    let nk = kept.len();

    let mut target_mean = vec![0.0; nd];
    for d in 0..nd {
        target_mean[d] = targets.column(d).sum() / rows_f;
    }

    let mut coefficients = Array2::zeros((nf, nd));
    let mut intercepts = vec![0.0; nd];
    let mut fitted = Array2::zeros((rows, nd));

    if nk == 0 {
        for d in 0..nd {
            intercepts[d] = target_mean[d];
            for r in 0..rows {
                fitted[[r, d]] = target_mean[d];
            }
        }
    } else {
        // standardized Gram and cross-moment matrices
        let mut gram = Array2::zeros((nk, nk));
        let mut cross = Array2::zeros((nk, nd));
        for r in 0..rows {
            let frow = features.row(r);
            let trow = targets.row(r);
            for (a, &ja) in kept.iter().enumerate() {
                let fa = (frow[ja] - mean[ja]) / std[ja];
                for (b, &jb) in kept.iter().enumerate().skip(a) {
                    let fb = (frow[jb] - mean[jb]) / std[jb];
                    gram[[a, b]] += fa * fb;
                }
                for d in 0..nd {
                    cross[[a, d]] += fa * (trow[d] - target_mean[d]);
                }
            }
        }
        for a in 0..nk {
            for b in 0..a {
                gram[[a, b]] = gram[[b, a]];
            }
        }
        gram /= rows_f;
        cross /= rows_f;
        for a in 0..nk {
            gram[[a, a]] += ridge;
        }
        cholesky_solve(&mut gram, &mut cross)?;
        let beta = cross; // standardized-space slopes

        // map back to raw feature space, keeping the intercept explicit
        for d in 0..nd {
            let mut intercept = target_mean[d];
            for (a, &ja) in kept.iter().enumerate() {
                let slope = beta[[a, d]] / std[ja];
                coefficients[[ja, d]] = slope;
                intercept -= slope * mean[ja];
            }
            intercepts[d] = intercept;
            for r in 0..rows {
                let mut acc = intercept;
                for (a, &ja) in kept.iter().enumerate() {
                    acc += beta[[a, d]] / std[ja] * (features[[r, ja]] - mean[ja]);
                }
                fitted[[r, d]] = acc;
            }
        }
    }

    Ok(Regression {
        coefficients,
        intercepts,
        fitted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn monomials_scalar_degree_two() {
        let e = monomial_exponents(1, 2);
        assert_eq!(e, vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn monomials_two_vars_degree_two() {
        let e = monomial_exponents(2, 2);
        assert_eq!(e.len(), 6);
        assert_eq!(e[0], vec![0, 0]);
        assert_eq!(e.iter().filter(|m| m.iter().sum::<u32>() == 2).count(), 3);
    }

    #[test]
    fn constant_target_is_reproduced_exactly() {
        let basis = PolyBasis::new(1, 2);
        let vars = Array2::from_shape_fn((50, 1), |(r, _)| -1.0 + r as f64 * 0.04);
        let x = basis.design_matrix(vars.view());
        let y = Array2::from_elem((50, 1), 3.25);
        let reg = regress(x.view(), y.view(), 0.0).unwrap();
        for r in 0..50 {
            assert!((reg.fitted[[r, 0]] - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_target_in_span_is_exact() {
        let basis = PolyBasis::new(1, 1);
        let vars = Array2::from_shape_fn((40, 1), |(r, _)| r as f64 * 0.1 - 2.0);
        let x = basis.design_matrix(vars.view());
        let y = Array2::from_shape_fn((40, 1), |(r, _)| vars[[r, 0]]);
        let reg = regress(x.view(), y.view(), 0.0).unwrap();
        for r in 0..40 {
            assert!(
                (reg.fitted[[r, 0]] - y[[r, 0]]).abs() < 1e-12,
                "row {r}: {} vs {}",
                reg.fitted[[r, 0]],
                y[[r, 0]]
            );
        }
    }

    #[test]
    fn residual_is_orthogonal_to_basis_on_symmetric_sample() {
        // quadratic target against a degree-1 basis on a symmetric grid:
        // fitted value is the sample mean, residual orthogonal to the basis
        let basis = PolyBasis::new(1, 1);
        let m = 41;
        let vars = Array2::from_shape_fn((m, 1), |(r, _)| -2.0 + r as f64 * 0.1);
        let x = basis.design_matrix(vars.view());
        let y = Array2::from_shape_fn((m, 1), |(r, _)| vars[[r, 0]] * vars[[r, 0]]);
        let reg = regress(x.view(), y.view(), 0.0).unwrap();
        let mean = y.column(0).sum() / m as f64;
        for r in 0..m {
            assert!((reg.fitted[[r, 0]] - mean).abs() < 1e-10);
        }
        for j in 0..x.dim().1 {
            let ip: f64 = (0..m)
                .map(|r| (y[[r, 0]] - reg.fitted[[r, 0]]) * x[[r, j]])
                .sum();
            assert!(ip.abs() <= 1e-10, "residual not orthogonal to column {j}");
        }
    }

    #[test]
    fn duplicate_columns_with_zero_ridge_are_rank_deficient() {
        let x = Array2::from_shape_fn((30, 3), |(r, c)| match c {
            0 => 1.0,
            _ => r as f64 * 0.3 - 4.0, // columns 1 and 2 identical
        });
        let y = Array2::from_shape_fn((30, 1), |(r, _)| r as f64);
        match regress(x.view(), y.view(), 0.0) {
            Err(Error::RankDeficient) => {}
            other => panic!("expected rank-deficiency error, got {other:?}"),
        }
        // a positive ridge resolves it
        assert!(regress(x.view(), y.view(), 1e-6).is_ok());
    }

    #[test]
    fn constant_feature_block_falls_back_to_target_mean() {
        // all features constant (step-0 situation): fitted = mean
        let x = Array2::from_elem((20, 3), 1.0);
        let y = Array2::from_shape_fn((20, 1), |(r, _)| r as f64);
        let reg = regress(x.view(), y.view(), 0.0).unwrap();
        for r in 0..20 {
            assert!((reg.fitted[[r, 0]] - 9.5).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_matches_fitted() {
        let basis = PolyBasis::new(2, 2);
        let vars = Array2::from_shape_fn((60, 2), |(r, c)| {
            (r as f64 * 0.37 + c as f64 * 1.3).sin()
        });
        let x = basis.design_matrix(vars.view());
        let y = Array2::from_shape_fn((60, 2), |(r, c)| {
            vars[[r, 0]] * 2.0 - vars[[r, 1]] + c as f64
        });
        let reg = regress(x.view(), y.view(), 0.0).unwrap();
        let mut out = vec![0.0; 2];
        for r in 0..60 {
            reg.predict(x.row(r).as_slice().unwrap(), &mut out);
            assert!((out[0] - reg.fitted[[r, 0]]).abs() < 1e-9);
            assert!((out[1] - reg.fitted[[r, 1]]).abs() < 1e-9);
        }
    }

    #[test]
    fn more_features_than_rows_is_rejected() {
        let x = Array2::zeros((3, 5));
        let y = Array2::zeros((3, 1));
        assert!(regress(x.view(), y.view(), 0.0).is_err());
    }

    #[test]
    fn mismatched_rows_are_rejected() {
        let x = array![[1.0], [1.0]];
        let y = array![[1.0]];
        assert!(regress(x.view(), y.view(), 0.0).is_err());
    }
}
