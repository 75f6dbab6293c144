//! Ridge least squares on polynomial features of the filter state.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_CONDITION: f64 = 1e10;
const CONSTANT_FEATURE_STD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    /// Total polynomial degree in the first `d - 1` simplex coordinates.
    pub degree: usize,
    /// Ridge weight on the standardized, non-intercept coefficients.
    pub ridge: f64,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        RegressionSpec {
            degree: 2,
            ridge: 1e-8,
        }
    }
}

impl RegressionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ridge must be finite and >= 0, got {}",
                self.ridge
            )));
        }
        Ok(())
    }
}

/// Exponent vectors of all monomials of total degree `1..=degree` in `vars`
/// variables, graded then lexicographic.
pub fn monomial_exponents(vars: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(vars: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == vars {
            if left == 0 {
                out.push(prefix.clone());
            }
            return;
        }
        for e in (0..=left).rev() {
            prefix.push(e);
            rec(vars, left - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in 1..=degree {
        rec(vars, total, &mut Vec::with_capacity(vars), &mut out);
    }
    out
}

/// Number of regression features including the intercept.
pub fn feature_count(d: usize, degree: usize) -> usize {
    1 + monomial_exponents(d - 1, degree).len()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolyBasis {
    exponents: Vec<Vec<usize>>,
}

impl PolyBasis {
    pub fn new(d: usize, degree: usize) -> Self {
        PolyBasis {
            exponents: monomial_exponents(d - 1, degree),
        }
    }

    /// Monomials without the intercept.
    pub fn raw_len(&self) -> usize {
        self.exponents.len()
    }

    pub fn eval_into(&self, pi: &[f64], out: &mut [f64]) {
        for (o, exps) in out.iter_mut().zip(&self.exponents) {
            *o = exps
                .iter()
                .zip(pi)
                .map(|(&e, &x)| x.powi(e as i32))
                .product();
        }
    }
}

/// Fitted linear map from raw features to a block of targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedRegression {
    /// Raw feature columns kept after dropping constant ones.
    pub kept: Vec<usize>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `(1 + kept.len()) x targets`, row 0 is the intercept.
    pub coef: DMatrix<f64>,
    /// Condition number of the augmented design (1 when only the intercept is used).
    pub condition: f64,
}

impl FittedRegression {
    pub fn targets(&self) -> usize {
        self.coef.ncols()
    }

    /// Predicts all targets for one raw feature row.
    pub fn predict_into(&self, raw: &[f64], out: &mut [f64]) {
        for (t, o) in out.iter_mut().enumerate() {
            let mut acc = self.coef[(0, t)];
            for (j, &col) in self.kept.iter().enumerate() {
                acc += self.coef[(j + 1, t)] * (raw[col] - self.mean[j]) / self.scale[j];
            }
            *o = acc;
        }
    }
}

/// Fits `targets` (row-major `n x t`) on `raw` features (row-major `n x p`).
///
/// Objective: `(1/n)|Xβ - y|² + ridge |β_{1:}|²` with standardized feature
/// columns, solved by Householder QR of the ridge-augmented design.
/// Exactly constant target columns are returned as exact intercepts.
pub fn fit(raw: &[f64], p: usize, targets: &[f64], t: usize, ridge: f64) -> Result<FittedRegression> {
    let n = targets.len().checked_div(t).unwrap_or(raw.len() / p.max(1));
    debug_assert_eq!(targets.len(), n * t);
    debug_assert_eq!(raw.len(), n * p);
    let nf = n as f64;

    let mut kept = Vec::new();
    let mut mean = Vec::new();
    let mut scale = Vec::new();
    for col in 0..p {
        let mu = (0..n).map(|r| raw[r * p + col]).sum::<f64>() / nf;
        let var = (0..n).map(|r| (raw[r * p + col] - mu).powi(2)).sum::<f64>() / nf;
        let sd = var.sqrt();
        if sd > CONSTANT_FEATURE_STD {
            kept.push(col);
            mean.push(mu);
            scale.push(sd);
        }
    }
    let q = kept.len();
    let cols = 1 + q;

    let constant_col: Vec<Option<f64>> = (0..t)
        .map(|c| {
            let first = targets[c];
            (0..n)
                .all(|r| targets[r * t + c].to_bits() == first.to_bits())
                .then_some(first)
        })
        .collect();

    let mut coef = DMatrix::zeros(cols, t);
    let mut condition = 1.0;
    let active: Vec<usize> = (0..t).filter(|&c| constant_col[c].is_none()).collect();
    for (c, v) in constant_col.iter().enumerate() {
        if let Some(v) = v {
            coef[(0, c)] = *v;
        }
    }
    if active.is_empty() {
        return Ok(FittedRegression {
            kept,
            mean,
            scale,
            coef,
            condition,
        });
    }
    if q == 0 {
        for &c in &active {
            coef[(0, c)] = (0..n).map(|r| targets[r * t + c]).sum::<f64>() / nf;
        }
        return Ok(FittedRegression {
            kept,
            mean,
            scale,
            coef,
            condition,
        });
    }

    let rows = n + q;
    let mut x = DMatrix::zeros(rows, cols);
    for r in 0..n {
        x[(r, 0)] = 1.0;
        for (j, &col) in kept.iter().enumerate() {
            x[(r, j + 1)] = (raw[r * p + col] - mean[j]) / scale[j];
        }
    }
    let penalty = (ridge * nf).sqrt();
    for j in 0..q {
        x[(n + j, j + 1)] = penalty;
    }
    let mut y = DMatrix::zeros(rows, active.len());
    for r in 0..n {
        for (a, &c) in active.iter().enumerate() {
            y[(r, a)] = targets[r * t + c];
        }
    }
    let qr = x.qr();
    let r_mat = qr.r();
    let sv = r_mat.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditionedRegression { cond: condition });
    }
    qr.q_tr_mul(&mut y);
    let top = y.rows(0, cols).into_owned();
    let beta = r_mat
        .solve_upper_triangular(&top)
        .ok_or(Error::IllConditionedRegression {
            cond: f64::INFINITY,
        })?;
    for (a, &c) in active.iter().enumerate() {
        for j in 0..cols {
            coef[(j, c)] = beta[(j, a)];
        }
    }
    Ok(FittedRegression {
        kept,
        mean,
        scale,
        coef,
        condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn monomials_are_graded() {
        assert_eq!(monomial_exponents(1, 3), vec![vec![1], vec![2], vec![3]]);
        let two = monomial_exponents(2, 2);
        assert_eq!(two, vec![vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]);
        assert_eq!(feature_count(2, 2), 3);
        assert_eq!(feature_count(3, 2), 6);
        assert_eq!(feature_count(4, 0), 1);
    }

    #[test]
    fn recovers_exact_polynomial() {
        let basis = PolyBasis::new(2, 2);
        let n = 200;
        let mut raw = vec![0.0; n * basis.raw_len()];
        let mut y = vec![0.0; n * 2];
        for r in 0..n {
            let x = r as f64 / n as f64;
            basis.eval_into(&[x, 1.0 - x], &mut raw[r * 2..r * 2 + 2]);
            y[r * 2] = 1.0 - 2.0 * x + 3.0 * x * x;
            y[r * 2 + 1] = 7.0;
        }
        let fit = fit(&raw, 2, &y, 2, 0.0).unwrap();
        let mut out = [0.0; 2];
        let mut feat = [0.0; 2];
        basis.eval_into(&[0.37, 0.63], &mut feat);
        fit.predict_into(&feat, &mut out);
        assert_relative_eq!(out[0], 1.0 - 0.74 + 3.0 * 0.37 * 0.37, epsilon = 1e-10);
        assert_eq!(out[1], 7.0);
    }

    #[test]
    fn constant_features_fall_back_to_mean() {
        let raw = vec![0.5; 10];
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let fit = fit(&raw, 1, &y, 1, 1e-8).unwrap();
        assert!(fit.kept.is_empty());
        assert_relative_eq!(fit.coef[(0, 0)], 4.5);
    }

    #[test]
    fn collinear_features_are_rejected_without_ridge() {
        let n = 50;
        let mut raw = vec![0.0; n * 2];
        let mut y = vec![0.0; n];
        for r in 0..n {
            let x = r as f64;
            raw[r * 2] = x;
            raw[r * 2 + 1] = 2.0 * x + 1.0;
            y[r] = x.sin();
        }
        assert!(matches!(
            fit(&raw, 2, &y, 1, 0.0),
            Err(Error::IllConditionedRegression { .. })
        ));
        assert!(fit(&raw, 2, &y, 1, 1e-6).is_ok());
    }

    #[test]
    fn scaling_targets_scales_coefficients() {
        let n = 100;
        let raw: Vec<f64> = (0..n).map(|r| (r as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..n).map(|r| (r as f64 * 0.11).cos()).collect();
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let a = fit(&raw, 1, &y, 1, 1e-8).unwrap();
        let b = fit(&raw, 1, &y2, 1, 1e-8).unwrap();
        assert_eq!(&a.coef * 2.0, b.coef);
    }
}
