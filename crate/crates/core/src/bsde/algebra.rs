//! Pointwise control formulas: the optimal feedback law, the co-state ansatz
//! and the maximum-principle control.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const MIN_MASS: f64 = 1e-14;

fn check_dims(d: usize, y: usize, v: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<()> {
    for (what, expected, got) in [
        ("value vector", d, y),
        ("martingale coefficient rows", d, v.nrows()),
        ("observation matrix rows", d, h.nrows()),
        ("martingale coefficient columns", h.ncols(), v.ncols()),
    ] {
        if expected != got {
            return Err(Error::DimensionMismatch {
                what,
                expected,
                got,
            });
        }
    }
    Ok(())
}

/// `U = -(π(hY) - π(h)π(Y)) - π(V)`, componentwise over observation channels.
pub fn optimal_feedback_control(
    pi: &DVector<f64>,
    y: &DVector<f64>,
    v: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_dims(pi.len(), y.len(), v, h)?;
    let mut out = DVector::zeros(h.ncols());
    optimal_feedback_into(pi.as_slice(), y.as_slice(), v.as_slice(), h, out.as_mut_slice());
    Ok(out)
}

/// Slice form of [`optimal_feedback_control`]; `v` is column-major `d x m`.
///
/// The covariance is taken against `Y - Y(0)`, so a constant `Y` gives an
/// exact zero.
pub(crate) fn optimal_feedback_into(pi: &[f64], y: &[f64], v: &[f64], h: &DMatrix<f64>, out: &mut [f64]) {
    let d = pi.len();
    let base = y[0];
    let pi_y: f64 = (0..d).map(|i| pi[i] * (y[i] - base)).sum();
    for (c, o) in out.iter_mut().enumerate() {
        let mut pi_hy = 0.0;
        let mut pi_h = 0.0;
        let mut pi_v = 0.0;
        for i in 0..d {
            pi_hy += pi[i] * h[(i, c)] * (y[i] - base);
            pi_h += pi[i] * h[(i, c)];
            pi_v += pi[i] * v[c * d + i];
        }
        *o = -(pi_hy - pi_h * pi_y) - pi_v;
    }
}

fn mass(sigma_vec: &DVector<f64>) -> Result<f64> {
    if let Some((i, v)) = sigma_vec.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "unnormalized density entry {i} is {v}"
        )));
    }
    let total = sigma_vec.sum();
    if !(total >= MIN_MASS) {
        return Err(Error::DegenerateMass { mass: total });
    }
    Ok(total)
}

/// `P(i) = 2 σ(i) (Y(i) - π(Y))` with `π = σ / σ(1)`.
pub fn costate_from_ansatz(sigma_vec: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if sigma_vec.len() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "value vector",
            expected: sigma_vec.len(),
            got: y.len(),
        });
    }
    let total = mass(sigma_vec)?;
    let pi_y = sigma_vec.dot(y) / total;
    Ok(DVector::from_fn(y.len(), |i, _| 2.0 * sigma_vec[i] * (y[i] - pi_y)))
}

/// `u = -HᵀP / (2 σ(1)) - πᵀV`.
pub fn control_from_maximum_principle(
    p: &DVector<f64>,
    sigma_vec: &DVector<f64>,
    v: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_dims(sigma_vec.len(), p.len(), v, h)?;
    let total = mass(sigma_vec)?;
    let pi = sigma_vec / total;
    Ok(-(h.transpose() * p) / (2.0 * total) - v.transpose() * pi)
}

/// Derivative of the finite-state Hamiltonian in `u`:
/// `-Hᵀp - 2 ρ(1) u - 2 Vᵀρ`.
pub fn hamiltonian_control_gradient(
    p: &DVector<f64>,
    rho: &DVector<f64>,
    v: &DMatrix<f64>,
    u: &DVector<f64>,
    h: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_dims(rho.len(), p.len(), v, h)?;
    if u.len() != h.ncols() {
        return Err(Error::DimensionMismatch {
            what: "control",
            expected: h.ncols(),
            got: u.len(),
        });
    }
    Ok(-(h.transpose() * p) - u * (2.0 * rho.sum()) - v.transpose() * rho * 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn feedback_examples() {
        let pi = DVector::from_vec(vec![0.5, 0.5]);
        let h = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let v0 = DMatrix::zeros(2, 1);
        let u = optimal_feedback_control(&pi, &DVector::from_vec(vec![0.0, 1.0]), &v0, &h).unwrap();
        assert_relative_eq!(u[0], -0.25);
        let c = optimal_feedback_control(&pi, &DVector::from_element(2, 3.3), &v0, &h).unwrap();
        assert_eq!(c[0], 0.0);
        let z = optimal_feedback_control(&pi, &DVector::from_vec(vec![1.0, -2.0]), &v0, &DMatrix::zeros(2, 1))
            .unwrap();
        assert_eq!(z[0], 0.0);
        assert!(optimal_feedback_control(&pi, &DVector::zeros(3), &v0, &h).is_err());
    }

    #[test]
    fn costate_examples() {
        let mu = DVector::from_vec(vec![0.5, 0.5]);
        let y = DVector::from_vec(vec![0.0, 1.0]);
        let p = costate_from_ansatz(&mu, &y).unwrap();
        assert_relative_eq!(p, DVector::from_vec(vec![-0.5, 0.5]), epsilon = 1e-15);
        let sigma0 = DMatrix::from_diagonal(&mu) - &mu * mu.transpose();
        assert_relative_eq!(p, &sigma0 * &y * 2.0, epsilon = 1e-15);
        assert_eq!(costate_from_ansatz(&mu, &DVector::from_element(2, 4.0)).unwrap(), DVector::zeros(2));
        let scaled = costate_from_ansatz(&(&mu * 3.0), &y).unwrap();
        assert_relative_eq!(scaled, &p * 3.0, epsilon = 1e-15);
        assert!(matches!(
            costate_from_ansatz(&DVector::zeros(2), &y),
            Err(Error::DegenerateMass { .. })
        ));
    }

    #[test]
    fn maximum_principle_examples() {
        let sigma = DVector::from_vec(vec![0.2, 0.8]);
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 2.0]);
        let v = DMatrix::from_row_slice(2, 2, &[0.1, -0.3, 0.7, 0.2]);
        let zero = control_from_maximum_principle(&DVector::zeros(2), &sigma, &DMatrix::zeros(2, 2), &h).unwrap();
        assert_eq!(zero, DVector::zeros(2));
        let u = control_from_maximum_principle(&DVector::from_vec(vec![1.0, 2.0]), &sigma, &v, &DMatrix::zeros(2, 2))
            .unwrap();
        assert_relative_eq!(u, -(v.transpose() * &sigma), epsilon = 1e-15);
    }

    #[allow(clippy::type_complexity)]
    fn inputs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, usize, usize, f64)> {
        (2usize..=5, 1usize..=3).prop_flat_map(|(d, m)| {
            (
                prop::collection::vec(0.01f64..10.0, d),
                prop::collection::vec(-5.0f64..5.0, d),
                prop::collection::vec(-5.0f64..5.0, d * m),
                prop::collection::vec(-5.0f64..5.0, d * m),
                Just(d),
                Just(m),
                -20.0f64..20.0,
            )
        })
    }

    proptest! {
        #[test]
        fn ansatz_reproduces_feedback((s, y, v, h, d, m, log_norm) in inputs()) {
            let sigma = DVector::from_vec(s) * log_norm.exp();
            let y = DVector::from_vec(y);
            let v = DMatrix::from_vec(d, m, v);
            let h = DMatrix::from_vec(d, m, h);
            let pi = &sigma / sigma.sum();
            let p = costate_from_ansatz(&sigma, &y).unwrap();
            let u_mp = control_from_maximum_principle(&p, &sigma, &v, &h).unwrap();
            let u_fb = optimal_feedback_control(&pi, &y, &v, &h).unwrap();
            prop_assert!((&u_mp - &u_fb).amax() <= 1e-12 * (1.0 + u_fb.amax()));
            let grad = hamiltonian_control_gradient(&p, &sigma, &v, &u_mp, &h).unwrap();
            let scale = (h.transpose() * &p).amax()
                .max(2.0 * sigma.sum() * u_mp.amax())
                .max(2.0 * (v.transpose() * &sigma).amax());
            prop_assert!(grad.amax() <= 1e-12 * (1.0 + scale));
        }

        #[test]
        fn normalization_cancels((s, y, v, h, d, m, log_norm) in inputs()) {
            let base = DVector::from_vec(s);
            let y = DVector::from_vec(y);
            let v = DMatrix::from_vec(d, m, v);
            let h = DMatrix::from_vec(d, m, h);
            let a = control_from_maximum_principle(&costate_from_ansatz(&base, &y).unwrap(), &base, &v, &h).unwrap();
            let scaled = &base * log_norm.exp();
            let b = control_from_maximum_principle(&costate_from_ansatz(&scaled, &y).unwrap(), &scaled, &v, &h).unwrap();
            prop_assert!((&a - &b).amax() <= 1e-12 * (1.0 + a.amax()));
        }
    }
}
