//! Wonham, Zakai and Kalman-Bucy filters (Euler time stepping), plus a
//! splitting discretization of the Wonham filter.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hmm::{FiniteModel, ObservationPath};
use crate::lq::LGModel;

const MIN_MASS: f64 = 1e-14;
const COV_BLOWUP: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterState {
    pub pi: DVector<f64>,
    /// Number of negative entries clipped so far.
    pub clip_events: u64,
}

impl FilterState {
    pub fn new(pi: DVector<f64>) -> Self {
        FilterState { pi, clip_events: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZakaiState {
    /// Unnormalized density divided by `exp(log_norm)`; sums to one.
    pub sigma_unnorm: DVector<f64>,
    pub log_norm: f64,
}

impl ZakaiState {
    pub fn new(prior: DVector<f64>) -> Self {
        ZakaiState {
            sigma_unnorm: prior,
            log_norm: 0.0,
        }
    }

    pub fn normalized(&self) -> DVector<f64> {
        let s = self.sigma_unnorm.sum();
        &self.sigma_unnorm / s
    }

    /// The full unnormalized vector `exp(log_norm) * sigma_unnorm`.
    pub fn unnormalized(&self) -> DVector<f64> {
        &self.sigma_unnorm * self.log_norm.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn check_dz(model: &FiniteModel, dz: &[f64]) -> Result<()> {
    if dz.len() != model.m() {
        return Err(Error::DimensionMismatch {
            what: "observation increment",
            expected: model.m(),
            got: dz.len(),
        });
    }
    Ok(())
}

/// One Euler step of the normalized filter, in place on a slice.
///
/// `scratch` must have length `d`. Returns the number of clipped entries.
pub(crate) fn wonham_step_in_place(
    model: &FiniteModel,
    pi: &mut [f64],
    scratch: &mut [f64],
    dz: &[f64],
    dt: f64,
) -> Result<u64> {
    let d = pi.len();
    let (rate, obs) = (&model.rate, &model.obs);
    for j in 0..d {
        let mut acc = pi[j];
        for i in 0..d {
            acc += dt * rate[(i, j)] * pi[i];
        }
        scratch[j] = acc;
    }
    for (c, &dzc) in dz.iter().enumerate() {
        let pih: f64 = (0..d).map(|i| pi[i] * obs[(i, c)]).sum();
        let innov = dzc - pih * dt;
        for i in 0..d {
            scratch[i] += (obs[(i, c)] - pih) * pi[i] * innov;
        }
    }
    let mut clips = 0;
    let mut mass = 0.0;
    for v in scratch.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
            clips += 1;
        }
        mass += *v;
    }
    if !(mass >= MIN_MASS) {
        return Err(Error::DegenerateMass { mass });
    }
    for (p, s) in pi.iter_mut().zip(scratch.iter()) {
        *p = s / mass;
    }
    Ok(clips)
}

pub fn wonham_step(
    model: &FiniteModel,
    state: &FilterState,
    dz: &[f64],
    dt: f64,
) -> Result<FilterState> {
    check_dz(model, dz)?;
    check_len(model.d(), state.pi.len())?;
    let mut pi = state.pi.clone();
    let mut scratch = vec![0.0; model.d()];
    let clips = wonham_step_in_place(model, pi.as_mut_slice(), &mut scratch, dz, dt)?;
    if clips > 0 {
        log::debug!("wonham step clipped {clips} entries");
    }
    Ok(FilterState {
        pi,
        clip_events: state.clip_events + clips,
    })
}

/// Wonham filter discretized by splitting: a Bayes update with the Gaussian
/// likelihood of `ΔZ_k` given `X_{t_k}`, then propagation by `exp(A dt)`.
///
/// For observations sampled as `ΔZ_k = h(X_{t_k}) dt + ΔW_k` this is the exact
/// conditional law of `X_{t_{k+1}}`, so it stays on the simplex without
/// clipping and carries no time-discretization bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SplittingFilter {
    transition: DMatrix<f64>,
    obs: DMatrix<f64>,
    dt: f64,
}

impl SplittingFilter {
    pub fn new(model: &FiniteModel, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        Ok(SplittingFilter {
            transition: crate::expm::expm(&(&model.rate * dt))?,
            obs: model.obs.clone(),
            dt,
        })
    }

    /// One-step transition matrix `exp(A dt)`.
    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    /// `scratch` must have length `d`.
    pub(crate) fn step_in_place(&self, pi: &mut [f64], scratch: &mut [f64], dz: &[f64]) -> Result<()> {
        let d = pi.len();
        let mut max_ll = f64::NEG_INFINITY;
        for i in 0..d {
            let mut ll = 0.0;
            for (c, &dzc) in dz.iter().enumerate() {
                let h = self.obs[(i, c)];
                ll += h * dzc - 0.5 * h * h * self.dt;
            }
            scratch[i] = ll;
            max_ll = max_ll.max(ll);
        }
        let mut mass = 0.0;
        for i in 0..d {
            scratch[i] = pi[i] * (scratch[i] - max_ll).exp();
            mass += scratch[i];
        }
        if !(mass >= MIN_MASS) {
            return Err(Error::DegenerateMass { mass });
        }
        for (j, p) in pi.iter_mut().enumerate() {
            *p = (0..d).map(|i| self.transition[(i, j)] * scratch[i]).sum::<f64>() / mass;
        }
        Ok(())
    }

    pub fn step(&self, state: &FilterState, dz: &[f64]) -> Result<FilterState> {
        if dz.len() != self.obs.ncols() {
            return Err(Error::DimensionMismatch {
                what: "observation increment",
                expected: self.obs.ncols(),
                got: dz.len(),
            });
        }
        check_len(self.obs.nrows(), state.pi.len())?;
        let mut pi = state.pi.clone();
        let mut scratch = vec![0.0; pi.len()];
        self.step_in_place(pi.as_mut_slice(), &mut scratch, dz)?;
        Ok(FilterState {
            pi,
            clip_events: state.clip_events,
        })
    }

    pub fn trajectory(&self, prior: &DVector<f64>, obs: &ObservationPath) -> Result<Vec<FilterState>> {
        let mut state = FilterState::new(prior.clone());
        let mut out = Vec::with_capacity(obs.steps() + 1);
        out.push(state.clone());
        for k in 0..obs.steps() {
            let dz: Vec<f64> = obs.increments.row(k).iter().copied().collect();
            state = self.step(&state, &dz)?;
            out.push(state.clone());
        }
        Ok(out)
    }
}

/// One Euler step of the unnormalized filter, in place; the mass is factored
/// into `log_norm`.
pub(crate) fn zakai_step_in_place(
    model: &FiniteModel,
    sigma: &mut [f64],
    log_norm: &mut f64,
    scratch: &mut [f64],
    dz: &[f64],
    dt: f64,
) -> Result<()> {
    let d = sigma.len();
    let (rate, obs) = (&model.rate, &model.obs);
    for j in 0..d {
        let mut acc = sigma[j];
        for i in 0..d {
            acc += dt * rate[(i, j)] * sigma[i];
        }
        for (c, &dzc) in dz.iter().enumerate() {
            acc += obs[(j, c)] * sigma[j] * dzc;
        }
        scratch[j] = acc.max(0.0);
    }
    let mass: f64 = scratch.iter().sum();
    if !(mass >= MIN_MASS) {
        return Err(Error::DegenerateMass { mass });
    }
    for (s, v) in sigma.iter_mut().zip(scratch.iter()) {
        *s = v / mass;
    }
    *log_norm += mass.ln();
    Ok(())
}

pub fn zakai_step(
    model: &FiniteModel,
    state: &ZakaiState,
    dz: &[f64],
    dt: f64,
) -> Result<ZakaiState> {
    check_dz(model, dz)?;
    check_len(model.d(), state.sigma_unnorm.len())?;
    let mut sigma = state.sigma_unnorm.clone();
    let mut log_norm = state.log_norm;
    let mut scratch = vec![0.0; model.d()];
    zakai_step_in_place(model, sigma.as_mut_slice(), &mut log_norm, &mut scratch, dz, dt)?;
    Ok(ZakaiState {
        sigma_unnorm: sigma,
        log_norm,
    })
}

/// Wonham trajectory over a whole observation path, starting from the prior.
pub fn wonham_trajectory(
    model: &FiniteModel,
    obs: &ObservationPath,
    dt: f64,
) -> Result<Vec<FilterState>> {
    let mut out = Vec::with_capacity(obs.steps() + 1);
    let mut state = FilterState::new(model.prior.clone());
    out.push(state.clone());
    for k in 0..obs.steps() {
        let dz: Vec<f64> = obs.increments.row(k).iter().copied().collect();
        state = wonham_step(model, &state, &dz, dt)?;
        out.push(state.clone());
    }
    Ok(out)
}

pub fn zakai_trajectory(
    model: &FiniteModel,
    obs: &ObservationPath,
    dt: f64,
) -> Result<Vec<ZakaiState>> {
    let mut out = Vec::with_capacity(obs.steps() + 1);
    let mut state = ZakaiState::new(model.prior.clone());
    out.push(state.clone());
    for k in 0..obs.steps() {
        let dz: Vec<f64> = obs.increments.row(k).iter().copied().collect();
        state = zakai_step(model, &state, &dz, dt)?;
        out.push(state.clone());
    }
    Ok(out)
}

/// Right-hand side of the Riccati equation.
pub(crate) fn riccati_rhs(lg: &LGModel, s: &DMatrix<f64>) -> DMatrix<f64> {
    let at = lg.a.transpose();
    &at * s + s * &lg.a + &lg.sigma * lg.sigma.transpose() - s * &lg.h * lg.h.transpose() * s
}

/// One RK4 step of the Riccati equation, symmetrized.
pub(crate) fn riccati_rk4(lg: &LGModel, s: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let k1 = riccati_rhs(lg, s);
    let k2 = riccati_rhs(lg, &(s + &k1 * (dt / 2.0)));
    let k3 = riccati_rhs(lg, &(s + &k2 * (dt / 2.0)));
    let k4 = riccati_rhs(lg, &(s + &k3 * dt));
    let next = s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let next = (&next + next.transpose()) * 0.5;
    let norm = next.norm();
    if !(norm <= COV_BLOWUP) {
        return Err(Error::CovarianceBlowup { norm });
    }
    Ok(next)
}

/// `dm = Aᵀm dt + Σ H (dZ - Hᵀm dt)` with the gain at the left endpoint; the
/// covariance takes one RK4 step.
pub fn kalman_bucy_step(
    lg: &LGModel,
    state: &KalmanState,
    dz: &[f64],
    dt: f64,
) -> Result<KalmanState> {
    if dz.len() != lg.m() {
        return Err(Error::DimensionMismatch {
            what: "observation increment",
            expected: lg.m(),
            got: dz.len(),
        });
    }
    let dz = DVector::from_column_slice(dz);
    let innov = dz - lg.h.transpose() * &state.mean * dt;
    let mean = &state.mean + lg.a.transpose() * &state.mean * dt + &state.cov * &lg.h * innov;
    let cov = riccati_rk4(lg, &state.cov, dt)?;
    Ok(KalmanState { mean, cov })
}

pub fn kalman_trajectory(
    lg: &LGModel,
    obs: &ObservationPath,
    dt: f64,
) -> Result<Vec<KalmanState>> {
    let mut state = KalmanState {
        mean: lg.m0.clone(),
        cov: lg.sigma0.clone(),
    };
    let mut out = vec![state.clone()];
    for k in 0..obs.steps() {
        let dz: Vec<f64> = obs.increments.row(k).iter().copied().collect();
        state = kalman_bucy_step(lg, &state, &dz, dt)?;
        out.push(state.clone());
    }
    Ok(out)
}

/// `π(f²) - π(f)²`, clamped at zero.
pub fn conditional_variance(pi: &DVector<f64>, f: &DVector<f64>) -> Result<f64> {
    check_len(pi.len(), f.len())?;
    Ok(conditional_variance_slice(pi.as_slice(), f.as_slice()))
}

/// Centered at `f[0]` first, so a constant `f` gives exactly zero.
pub(crate) fn conditional_variance_slice(pi: &[f64], f: &[f64]) -> f64 {
    let base = f[0];
    let mean: f64 = pi.iter().zip(f).map(|(p, v)| p * (v - base)).sum();
    let v: f64 = pi.iter().zip(f).map(|(p, v)| p * (v - base - mean).powi(2)).sum();
    v.max(0.0)
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what: "filter vector",
            expected,
            got,
        })
    }
}
