//! Finite-state hidden Markov model with white-noise observations.
//!
//! The hidden state is a continuous-time Markov chain on `{0, .., d-1}` with
//! rate matrix `A` (a function `f` on the state space is a `d`-vector and the
//! generator acts as `A f`). Observations are `dZ = h(X) dt + dW` where row `i`
//! of the `d x m` matrix `H` is `h(i)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::expm::expm;
use crate::grid::TimeGrid;

const ROW_SUM_TOL: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-12;
const SIMPLEX_RENORMALIZE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteModel {
    /// `d x d` rate matrix; off-diagonal entries nonnegative, rows sum to zero.
    pub rate: DMatrix<f64>,
    /// `d x m` observation matrix; column `k` is the observation function `h_k`.
    pub obs: DMatrix<f64>,
    /// Law of the initial state.
    pub prior: DVector<f64>,
}

impl FiniteModel {
    pub fn new(rate: DMatrix<f64>, obs: DMatrix<f64>, prior: DVector<f64>) -> Result<Self> {
        validate_model(FiniteModel { rate, obs, prior })
    }

    /// Symmetric two-state chain with unit switching rate, `h = (0, 1)` and a
    /// uniform prior. Most tests and fixtures are pinned to this model.
    pub fn canonical_two_state() -> Self {
        FiniteModel {
            rate: DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
            obs: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            prior: DVector::from_vec(vec![0.5, 0.5]),
        }
    }

    pub fn d(&self) -> usize {
        self.rate.nrows()
    }

    pub fn m(&self) -> usize {
        self.obs.ncols()
    }

    pub fn with_prior(&self, prior: DVector<f64>) -> Result<Self> {
        FiniteModel::new(self.rate.clone(), self.obs.clone(), prior)
    }
}

/// Checks every structural invariant of a [`FiniteModel`].
///
/// A prior whose mass is off by more than 1e-12 but at most 1e-10 is
/// renormalized with a warning; larger drift is rejected.
pub fn validate_model(mut model: FiniteModel) -> Result<FiniteModel> {
    let d = model.rate.nrows();
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "state count must be at least 2, got {d}"
        )));
    }
    if model.rate.ncols() != d {
        return Err(Error::DimensionMismatch {
            what: "rate matrix columns",
            expected: d,
            got: model.rate.ncols(),
        });
    }
    if model.obs.nrows() != d {
        return Err(Error::DimensionMismatch {
            what: "observation matrix rows",
            expected: d,
            got: model.obs.nrows(),
        });
    }
    if model.obs.ncols() == 0 {
        return Err(Error::InvalidArgument(
            "observation dimension must be at least 1".into(),
        ));
    }
    if model.prior.len() != d {
        return Err(Error::DimensionMismatch {
            what: "prior length",
            expected: d,
            got: model.prior.len(),
        });
    }
    if model.rate.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("rate matrix".into()));
    }
    if model.obs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("observation matrix".into()));
    }
    if model.prior.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("prior".into()));
    }
    for i in 0..d {
        for j in 0..d {
            if i != j && model.rate[(i, j)] < 0.0 {
                return Err(Error::NegativeRate {
                    row: i,
                    col: j,
                    value: model.rate[(i, j)],
                });
            }
        }
        let sum: f64 = model.rate.row(i).iter().sum();
        if sum.abs() > ROW_SUM_TOL {
            return Err(Error::RowSumViolation { row: i, sum });
        }
    }
    model.prior = check_simplex(model.prior)?;
    Ok(model)
}

fn check_simplex(p: DVector<f64>) -> Result<DVector<f64>> {
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::InvalidSimplex(format!("entry {i} is negative ({v})")));
    }
    let total: f64 = p.iter().sum();
    let drift = (total - 1.0).abs();
    if drift <= SIMPLEX_TOL {
        Ok(p)
    } else if drift <= SIMPLEX_RENORMALIZE_TOL {
        log::warn!("prior mass {total} renormalized to 1");
        Ok(p / total)
    } else {
        Err(Error::InvalidSimplex(format!("entries sum to {total}")))
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

/// Carré du champ `(Γf)(i) = Σ_j A(i,j) (f(i) - f(j))²`.
pub fn carre_du_champ(model: &FiniteModel, f: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("carre_du_champ argument", model.d(), f.len())?;
    if f.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("carre_du_champ argument".into()));
    }
    Ok(carre_du_champ_slice(&model.rate, f.as_slice()))
}

pub(crate) fn carre_du_champ_slice(rate: &DMatrix<f64>, f: &[f64]) -> DVector<f64> {
    let d = f.len();
    DVector::from_fn(d, |i, _| {
        (0..d)
            .filter(|&j| j != i)
            .map(|j| rate[(i, j)] * (f[i] - f[j]).powi(2))
            .sum()
    })
}

/// `ρ(Γf) = Σ_i ρ(i) (Γf)(i)` without allocating.
pub(crate) fn weighted_carre_du_champ(rate: &DMatrix<f64>, rho: &[f64], f: &[f64]) -> f64 {
    let d = f.len();
    let mut acc = 0.0;
    for i in 0..d {
        if rho[i] == 0.0 {
            continue;
        }
        let mut g = 0.0;
        for j in 0..d {
            if j != i {
                g += rate[(i, j)] * (f[i] - f[j]).powi(2);
            }
        }
        acc += rho[i] * g;
    }
    acc
}

/// The matrices `Q(i) = Σ_j A(i,j) (e_i - e_j)(e_i - e_j)ᵀ`, so that
/// `fᵀ Q(i) f = (Γf)(i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrices {
    pub q: Vec<DMatrix<f64>>,
}

impl GammaMatrices {
    /// `ρ(Q) = Σ_i ρ(i) Q(i)`.
    pub fn combine(&self, rho: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_len("gamma combiner weights", self.q.len(), rho.len())?;
        let d = self.q.len();
        let mut out = DMatrix::zeros(d, d);
        for (qi, &w) in self.q.iter().zip(rho.iter()) {
            out += qi * w;
        }
        Ok(out)
    }
}

pub fn gamma_matrices(model: &FiniteModel) -> GammaMatrices {
    let d = model.d();
    let q = (0..d)
        .map(|i| {
            let mut qi = DMatrix::zeros(d, d);
            for j in (0..d).filter(|&j| j != i) {
                let a = model.rate[(i, j)];
                qi[(i, i)] += a;
                qi[(j, j)] += a;
                qi[(i, j)] -= a;
                qi[(j, i)] -= a;
            }
            qi
        })
        .collect();
    GammaMatrices { q }
}

/// Law of `X_t`: `ρ_t = exp(t Aᵀ) μ`.
pub fn forward_marginal(model: &FiniteModel, t: f64) -> Result<DVector<f64>> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time must be >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(model.prior.clone());
    }
    let propagator = expm(&(model.rate.transpose() * t))?;
    Ok(propagator * &model.prior)
}

/// `ρ_{t_k}` at every grid point, stepping with the one-step propagator
/// `exp(dt Aᵀ)`.
pub fn marginals_on_grid(model: &FiniteModel, grid: &TimeGrid) -> Result<Vec<DVector<f64>>> {
    let step = expm(&(model.rate.transpose() * grid.dt()))?;
    let mut out = Vec::with_capacity(grid.steps() + 1);
    let mut rho = model.prior.clone();
    out.push(rho.clone());
    for _ in 0..grid.steps() {
        rho = &step * rho;
        out.push(rho.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    /// Strictly increasing jump times in `(0, T]`.
    pub jump_times: Vec<f64>,
    /// `states[0]` is `X_0`; `states[i + 1]` is the state entered at `jump_times[i]`.
    pub states: Vec<usize>,
    /// State at each grid time (right-continuous).
    pub grid_states: Vec<usize>,
}

impl StatePath {
    /// State at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        let jumps = self.jump_times.partition_point(|&s| s <= t);
        self.states[jumps]
    }

    pub fn terminal_state(&self) -> usize {
        *self.grid_states.last().expect("grid has at least one point")
    }
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Exact jump-chain simulation: exponential holding times and jumps drawn
/// from the normalized off-diagonal rates.
pub fn simulate_state_path<R: Rng + ?Sized>(
    model: &FiniteModel,
    grid: &TimeGrid,
    rng: &mut R,
) -> StatePath {
    let d = model.d();
    let horizon = grid.horizon();
    let mut state = sample_categorical(rng, model.prior.as_slice());
    let mut states = vec![state];
    let mut jump_times = Vec::new();
    let mut t = 0.0;
    let mut jump_weights = vec![0.0; d];
    loop {
        let exit_rate = -model.rate[(state, state)];
        if exit_rate <= 0.0 {
            break;
        }
        let hold: f64 = rng.sample::<f64, _>(Exp1) / exit_rate;
        t += hold;
        if t > horizon {
            break;
        }
        for (j, w) in jump_weights.iter_mut().enumerate() {
            *w = if j == state { 0.0 } else { model.rate[(state, j)] };
        }
        state = sample_categorical(rng, &jump_weights);
        jump_times.push(t);
        states.push(state);
    }

    let mut grid_states = Vec::with_capacity(grid.steps() + 1);
    let mut next_jump = 0;
    for k in 0..=grid.steps() {
        let tk = grid.time(k);
        while next_jump < jump_times.len() && jump_times[next_jump] <= tk {
            next_jump += 1;
        }
        grid_states.push(states[next_jump]);
    }
    StatePath {
        jump_times,
        states,
        grid_states,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath {
    /// `K x m` increments `ΔZ_k = Z_{t_{k+1}} - Z_{t_k}`.
    pub increments: DMatrix<f64>,
    /// `(K+1) x m` path with `Z_0 = 0`.
    pub cumulative: DMatrix<f64>,
    /// `K x m` Brownian increments `ΔW_k`.
    pub noise_increments: DMatrix<f64>,
}

impl ObservationPath {
    pub fn steps(&self) -> usize {
        self.increments.nrows()
    }

    pub(crate) fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.steps() == grid.steps() {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                expected: grid.steps(),
                got: self.steps(),
            })
        }
    }
}

/// Builds `ΔZ_k = h(X_{t_k}) dt + ΔW_k` from given Brownian increments
/// (left-endpoint rule for the drift integral).
pub fn observation_from_noise(
    model: &FiniteModel,
    path: &StatePath,
    grid: &TimeGrid,
    noise_increments: DMatrix<f64>,
) -> Result<ObservationPath> {
    let (k_steps, m) = (grid.steps(), model.m());
    if noise_increments.nrows() != k_steps {
        return Err(Error::GridMismatch {
            expected: k_steps,
            got: noise_increments.nrows(),
        });
    }
    check_len("noise increment width", m, noise_increments.ncols())?;
    let dt = grid.dt();
    let mut increments = noise_increments.clone();
    let mut cumulative = DMatrix::zeros(k_steps + 1, m);
    for k in 0..k_steps {
        let x = path.grid_states[k];
        for c in 0..m {
            increments[(k, c)] += model.obs[(x, c)] * dt;
            cumulative[(k + 1, c)] = cumulative[(k, c)] + increments[(k, c)];
        }
    }
    Ok(ObservationPath {
        increments,
        cumulative,
        noise_increments,
    })
}

pub fn simulate_observation_path<R: Rng + ?Sized>(
    model: &FiniteModel,
    path: &StatePath,
    grid: &TimeGrid,
    rng: &mut R,
) -> ObservationPath {
    let sd = grid.dt().sqrt();
    let noise = DMatrix::from_fn(grid.steps(), model.m(), |_, _| {
        sd * rng.sample::<f64, _>(StandardNormal)
    });
    observation_from_noise(model, path, grid, noise).expect("shapes built from the grid")
}

/// State path then observation noise, both from one stream.
pub fn simulate_path<R: Rng + ?Sized>(
    model: &FiniteModel,
    grid: &TimeGrid,
    rng: &mut R,
) -> (StatePath, ObservationPath) {
    let x = simulate_state_path(model, grid, rng);
    let z = simulate_observation_path(model, &x, grid, rng);
    (x, z)
}
