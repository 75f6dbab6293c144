//! Dense matrix exponential by scaling and squaring with a diagonal Padé(6,6)
//! approximant.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const PADE_ORDER: usize = 6;
// ||A / 2^s||_inf <= 1/2 keeps the Padé(6,6) truncation error below 1e-15.
const SCALED_NORM_BOUND: f64 = 0.5;
const MAX_SQUARINGS: i32 = 1074;

fn pade_coefficients() -> [f64; PADE_ORDER + 1] {
    let q = PADE_ORDER;
    let mut c = [0.0; PADE_ORDER + 1];
    c[0] = 1.0;
    for j in 1..=q {
        c[j] = c[j - 1] * (q - j + 1) as f64 / (j * (2 * q - j + 1)) as f64;
    }
    c
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(m)` for a square matrix.
pub fn expm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "expm (square matrix)",
            expected: n,
            got: m.ncols(),
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("expm argument".into()));
    }
    let norm = inf_norm(m);
    let squarings = if norm > SCALED_NORM_BOUND {
        (norm / SCALED_NORM_BOUND).log2().ceil() as i32
    } else {
        0
    };
    if squarings > MAX_SQUARINGS {
        return Err(Error::NonConvergedExpm);
    }
    let x = m * 2f64.powi(-squarings);

    let c = pade_coefficients();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut numer = eye.clone() * c[0];
    let mut denom = eye.clone() * c[0];
    let mut power = eye;
    for (j, &cj) in c.iter().enumerate().skip(1) {
        power = &power * &x;
        numer += &power * cj;
        if j % 2 == 0 {
            denom += &power * cj;
        } else {
            denom -= &power * cj;
        }
    }
    let mut result = denom.lu().solve(&numer).ok_or(Error::NonConvergedExpm)?;
    for _ in 0..squarings {
        result = &result * &result;
    }
    if result.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonConvergedExpm);
    }
    Ok(result)
}
