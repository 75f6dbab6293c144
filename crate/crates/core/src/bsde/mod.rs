//! Least-squares Monte-Carlo solution of the dual backward equation and the
//! diagnostics built on it.
//!
//! Conditional expectations given the observations are regressed on
//! polynomial features of the filter state. The ensemble is simulated under
//! the physical measure, so the martingale part is identified through the
//! innovation increments `ΔI = ΔZ - π(h) dt`.
//!
//! Time stepping follows the grid-sampled model exactly where that is cheap:
//! the filter is the splitting filter, the generator enters through
//! `exp(A dt)`, and the running cost is the one-step conditional variance.
//! What is left is the regression error and the first-order expansion of the
//! likelihood ratio in `ΔI`.

pub mod algebra;
pub mod regression;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filters::{conditional_variance_slice, zakai_step_in_place, SplittingFilter};
use crate::grid::TimeGrid;
use crate::hmm::{simulate_path, FiniteModel};
use crate::rng::{path_stream, StreamRole};
use crate::stats::{MeanStderr, Welford};

pub use algebra::{
    control_from_maximum_principle, costate_from_ansatz, hamiltonian_control_gradient,
    optimal_feedback_control,
};
pub use regression::{FittedRegression, PolyBasis, RegressionSpec};

/// Paths are simulated and reduced in chunks of this size; the reduction
/// order is the path order, whatever the thread count.
const CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// The feedback law `U = -(π(hY) - π(h)π(Y)) - π(V)`.
    Optimal,
    /// A fixed `K x m` control schedule.
    OpenLoop { u: DMatrix<f64> },
    /// The optimal feedback shifted by `delta` in every component.
    Perturbed { delta: f64 },
}

impl Policy {
    fn check(&self, model: &FiniteModel, grid: &TimeGrid) -> Result<()> {
        match self {
            Policy::Optimal => Ok(()),
            Policy::OpenLoop { u } => {
                if u.nrows() != grid.steps() {
                    return Err(Error::GridMismatch {
                        expected: grid.steps(),
                        got: u.nrows(),
                    });
                }
                if u.ncols() != model.m() {
                    return Err(Error::DimensionMismatch {
                        what: "open-loop control width",
                        expected: model.m(),
                        got: u.ncols(),
                    });
                }
                if u.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("open-loop control".into()));
                }
                Ok(())
            }
            Policy::Perturbed { delta } => {
                if delta.is_finite() {
                    Ok(())
                } else {
                    Err(Error::NonFinite("perturbation".into()))
                }
            }
        }
    }
}

/// One simulated path with its filter trajectories, path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    /// State at each grid time.
    pub states: Vec<usize>,
    /// `K x m` observation increments, row-major.
    pub dz: Vec<f64>,
    /// `(K+1) x d` filter, row-major.
    pub pi: Vec<f64>,
    /// `(K+1) x d` mass-normalized Zakai state and its log mass.
    pub zakai: Option<(Vec<f64>, Vec<f64>)>,
}

impl PathRecord {
    pub fn simulate(
        model: &FiniteModel,
        filter: &SplittingFilter,
        grid: &TimeGrid,
        seed: u64,
        role: StreamRole,
        path: u64,
        with_zakai: bool,
    ) -> Result<Self> {
        let (d, m, k_steps, dt) = (model.d(), model.m(), grid.steps(), grid.dt());
        let mut rng = path_stream(seed, role, path);
        let (x, z) = simulate_path(model, grid, &mut rng);
        let mut dz = Vec::with_capacity(k_steps * m);
        for k in 0..k_steps {
            dz.extend(z.increments.row(k).iter());
        }
        let mut pi = vec![0.0; (k_steps + 1) * d];
        pi[..d].copy_from_slice(model.prior.as_slice());
        let mut scratch = vec![0.0; d];
        for k in 0..k_steps {
            let (head, tail) = pi.split_at_mut((k + 1) * d);
            let next = &mut tail[..d];
            next.copy_from_slice(&head[k * d..]);
            filter.step_in_place(next, &mut scratch, &dz[k * m..(k + 1) * m])?;
        }
        let zakai = if with_zakai {
            let mut zp = vec![0.0; (k_steps + 1) * d];
            let mut ln = vec![0.0; k_steps + 1];
            zp[..d].copy_from_slice(model.prior.as_slice());
            for k in 0..k_steps {
                let (head, tail) = zp.split_at_mut((k + 1) * d);
                let next = &mut tail[..d];
                next.copy_from_slice(&head[k * d..]);
                let mut log_norm = ln[k];
                zakai_step_in_place(model, next, &mut log_norm, &mut scratch, &dz[k * m..(k + 1) * m], dt)?;
                ln[k + 1] = log_norm;
            }
            Some((zp, ln))
        } else {
            None
        };
        Ok(PathRecord {
            states: x.grid_states,
            dz,
            pi,
            zakai,
        })
    }
}

/// Maps `f` over paths `0..n` in parallel chunks and folds the results in path
/// order.
pub(crate) fn map_fold_paths<T, F, G>(n: usize, map: F, mut fold: G) -> Result<()>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
    G: FnMut(u64, T),
{
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let chunk: Vec<Result<T>> = (start as u64..end as u64).into_par_iter().map(&map).collect();
        for (i, r) in chunk.into_iter().enumerate() {
            fold(start as u64 + i as u64, r?);
        }
        start = end;
    }
    Ok(())
}

/// Joint sample of states, observations and filters, stored time-major so
/// each backward regression reads contiguous memory.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub n_paths: usize,
    pub grid: TimeGrid,
    d: usize,
    m: usize,
    states: Vec<u32>,
    dz: Vec<f64>,
    pi: Vec<f64>,
    zakai_pi: Option<Vec<f64>>,
    zakai_log_norm: Option<Vec<f64>>,
}

impl PathEnsemble {
    pub fn simulate(
        model: &FiniteModel,
        grid: &TimeGrid,
        n_paths: usize,
        seed: u64,
        role: StreamRole,
        with_zakai: bool,
    ) -> Result<Self> {
        if n_paths == 0 {
            return Err(Error::InvalidArgument("need at least one path".into()));
        }
        let (d, m, k_steps) = (model.d(), model.m(), grid.steps());
        let n = n_paths;
        let mut ens = PathEnsemble {
            n_paths,
            grid: *grid,
            d,
            m,
            states: vec![0; (k_steps + 1) * n],
            dz: vec![0.0; k_steps * n * m],
            pi: vec![0.0; (k_steps + 1) * n * d],
            zakai_pi: with_zakai.then(|| vec![0.0; (k_steps + 1) * n * d]),
            zakai_log_norm: with_zakai.then(|| vec![0.0; (k_steps + 1) * n]),
        };
        let filter = SplittingFilter::new(model, grid.dt())?;
        map_fold_paths(
            n,
            |p| PathRecord::simulate(model, &filter, grid, seed, role, p, with_zakai),
            |p, rec| {
                let p = p as usize;
                for k in 0..=k_steps {
                    ens.states[k * n + p] = rec.states[k] as u32;
                    ens.pi[(k * n + p) * d..(k * n + p + 1) * d]
                        .copy_from_slice(&rec.pi[k * d..(k + 1) * d]);
                    if let (Some(zp), Some(zl), Some((rp, rl))) =
                        (ens.zakai_pi.as_mut(), ens.zakai_log_norm.as_mut(), rec.zakai.as_ref())
                    {
                        zp[(k * n + p) * d..(k * n + p + 1) * d]
                            .copy_from_slice(&rp[k * d..(k + 1) * d]);
                        zl[k * n + p] = rl[k];
                    }
                }
                for k in 0..k_steps {
                    ens.dz[(k * n + p) * m..(k * n + p + 1) * m]
                        .copy_from_slice(&rec.dz[k * m..(k + 1) * m]);
                }
            },
        )?;
        Ok(ens)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn pi(&self, k: usize, path: usize) -> &[f64] {
        let i = k * self.n_paths + path;
        &self.pi[i * self.d..(i + 1) * self.d]
    }

    pub fn dz(&self, k: usize, path: usize) -> &[f64] {
        let i = k * self.n_paths + path;
        &self.dz[i * self.m..(i + 1) * self.m]
    }

    pub fn state(&self, k: usize, path: usize) -> usize {
        self.states[k * self.n_paths + path] as usize
    }

    pub fn zakai_pi(&self, k: usize, path: usize) -> Option<&[f64]> {
        let i = k * self.n_paths + path;
        self.zakai_pi.as_ref().map(|z| &z[i * self.d..(i + 1) * self.d])
    }

    pub fn zakai_log_norm(&self, k: usize, path: usize) -> Option<f64> {
        self.zakai_log_norm.as_ref().map(|z| z[k * self.n_paths + path])
    }
}

/// Regression fits for one backward step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepFit {
    /// Conditional expectation of `Y_{k+1}`.
    pub y: FittedRegression,
    /// Martingale coefficient `V_k`, column-major `d x m` targets.
    pub v: FittedRegression,
}

/// Values of the dual solution at one grid time for a given filter state.
#[derive(Debug, Clone, PartialEq)]
pub struct StepValue {
    pub y_tilde: Vec<f64>,
    /// Column-major `d x m`.
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    features: Vec<f64>,
    pi_h: Vec<f64>,
}

impl StepValue {
    pub fn new(d: usize, m: usize, raw_features: usize) -> Self {
        StepValue {
            y_tilde: vec![0.0; d],
            v: vec![0.0; d * m],
            u: vec![0.0; m],
            y: vec![0.0; d],
            features: vec![0.0; raw_features],
            pi_h: vec![0.0; m],
        }
    }

    pub fn v_matrix(&self) -> DMatrix<f64> {
        let d = self.y.len();
        DMatrix::from_column_slice(d, self.v.len() / d, &self.v)
    }
}

/// The dual solution as a function of the filter state: `Y_k`, `V_k` and `U_k`
/// are evaluated from the per-step regression fits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualTrajectory {
    pub grid: TimeGrid,
    pub f_terminal: DVector<f64>,
    pub policy: Policy,
    pub spec: RegressionSpec,
    pub steps: Vec<StepFit>,
    #[serde(skip)]
    basis: PolyBasis,
    #[serde(skip)]
    transition: DMatrix<f64>,
    #[serde(skip)]
    obs: DMatrix<f64>,
}

impl DualTrajectory {
    pub fn d(&self) -> usize {
        self.f_terminal.len()
    }

    pub fn m(&self) -> usize {
        self.obs.ncols()
    }

    pub fn new_value(&self) -> StepValue {
        StepValue::new(self.d(), self.m(), self.basis.raw_len())
    }

    /// Fills `out` with `Ỹ_k, V_k, U_k, Y_k` at filter state `pi`. At `k = K`
    /// only `Y_K = f` is meaningful and the rest is zero.
    pub fn eval(&self, k: usize, pi: &[f64], out: &mut StepValue) {
        if k == self.grid.steps() {
            out.y.copy_from_slice(self.f_terminal.as_slice());
            out.y_tilde.copy_from_slice(self.f_terminal.as_slice());
            out.v.iter_mut().for_each(|v| *v = 0.0);
            out.u.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        self.eval_fit(&self.steps[k], k, pi, out);
    }

    fn eval_fit(&self, fit: &StepFit, k: usize, pi: &[f64], out: &mut StepValue) {
        let (d, m) = (self.d(), self.m());
        self.basis.eval_into(pi, &mut out.features);
        fit.y.predict_into(&out.features, &mut out.y_tilde);
        fit.v.predict_into(&out.features, &mut out.v);
        match &self.policy {
            Policy::Optimal => {
                algebra::optimal_feedback_into(pi, &out.y_tilde, &out.v, &self.obs, &mut out.u)
            }
            Policy::Perturbed { delta } => {
                algebra::optimal_feedback_into(pi, &out.y_tilde, &out.v, &self.obs, &mut out.u);
                out.u.iter_mut().for_each(|u| *u += delta);
            }
            Policy::OpenLoop { u } => {
                for c in 0..m {
                    out.u[c] = u[(k, c)];
                }
            }
        }
        let dt = self.grid.dt();
        let yt = &out.y_tilde;
        for c in 0..m {
            out.pi_h[c] = (0..d).map(|l| pi[l] * self.obs[(l, c)]).sum();
        }
        for i in 0..d {
            // Σ_j P(i,j) (Ỹ(j) + dt Σ_c V(j,c) (h(i,c) - π(h_c))) + dt h(i)·U,
            // written so that the unit row sums of P hold exactly
            let mut acc = yt[i];
            for j in 0..d {
                let jump = if j == i { 0.0 } else { yt[j] - yt[i] };
                let corr: f64 = (0..m)
                    .map(|c| out.v[c * d + j] * (self.obs[(i, c)] - out.pi_h[c]))
                    .sum();
                acc += self.transition[(i, j)] * (jump + dt * corr);
            }
            for c in 0..m {
                acc += dt * self.obs[(i, c)] * out.u[c];
            }
            out.y[i] = acc;
        }
    }

    /// `E[(Ỹ(X') - E[Ỹ(X')|X=i])² + |U + V(X', ·)|² dt]` over the exact
    /// one-step transition from state `i`.
    fn one_step_cost(&self, value: &StepValue, i: usize) -> f64 {
        let (d, m, dt) = (self.d(), self.m(), self.grid.dt());
        let yt = &value.y_tilde;
        let mut mean = yt[i];
        for j in 0..d {
            if j != i {
                mean += self.transition[(i, j)] * (yt[j] - yt[i]);
            }
        }
        let mut acc = 0.0;
        for j in 0..d {
            let c2: f64 = (0..m).map(|c| (value.u[c] + value.v[c * d + j]).powi(2)).sum();
            acc += self.transition[(i, j)] * ((yt[j] - mean).powi(2) + c2 * dt);
        }
        acc
    }

    /// `Y_0`, evaluated at the prior.
    pub fn initial_value(&self, prior: &DVector<f64>) -> DVector<f64> {
        let mut v = self.new_value();
        self.eval(0, prior.as_slice(), &mut v);
        DVector::from_vec(v.y)
    }

    /// Per-time values along one ensemble path.
    pub fn materialize(&self, ensemble: &PathEnsemble, path: usize) -> Vec<StepValue> {
        (0..=self.grid.steps())
            .map(|k| {
                let mut v = self.new_value();
                self.eval(k, ensemble.pi(k, path), &mut v);
                v
            })
            .collect()
    }
}

fn check_terminal(model: &FiniteModel, f: &DVector<f64>) -> Result<()> {
    if f.len() != model.d() {
        return Err(Error::DimensionMismatch {
            what: "terminal function",
            expected: model.d(),
            got: f.len(),
        });
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("terminal function".into()));
    }
    Ok(())
}

/// Backward induction from `Y_K = f`. At step `k`:
/// `Ỹ_k = E[Y_{k+1} | π_k]`, `V_k = E[(Y_{k+1} - Ỹ_k) ΔI_kᵀ | π_k] / dt`,
/// `U_k` from the policy, and with `P = exp(A dt)`
/// `Y_k(i) = Σ_j P(i,j) (Ỹ_k(j) + dt Σ_c V_k(j,c) (H(i,c) - π_k(h_c))) + dt (HU_k)(i)`.
///
/// With `P ≈ I + A dt` this is the explicit Euler step
/// `Ỹ + dt (AỸ + HU + diag(HVᵀ) - V π(h))`; the exponential form removes the
/// first-order bias of that step in the generator part.
pub fn lsmc_backward_solve(
    model: &FiniteModel,
    f_terminal: &DVector<f64>,
    policy: &Policy,
    ensemble: &PathEnsemble,
    spec: &RegressionSpec,
) -> Result<DualTrajectory> {
    check_terminal(model, f_terminal)?;
    spec.validate()?;
    let grid = ensemble.grid;
    policy.check(model, &grid)?;
    for (what, expected, got) in [
        ("ensemble state dimension", model.d(), ensemble.d()),
        ("ensemble observation dimension", model.m(), ensemble.m()),
    ] {
        if expected != got {
            return Err(Error::DimensionMismatch { what, expected, got });
        }
    }
    let (d, m, n, k_steps, dt) = (model.d(), model.m(), ensemble.n_paths, grid.steps(), grid.dt());
    let basis = PolyBasis::new(d, spec.degree);
    let features = 1 + basis.raw_len();
    if features * 10 > n {
        return Err(Error::FeatureCountTooLarge { features, paths: n });
    }
    let p = basis.raw_len();
    let mut traj = DualTrajectory {
        grid,
        f_terminal: f_terminal.clone(),
        policy: policy.clone(),
        spec: *spec,
        steps: Vec::with_capacity(k_steps),
        basis: basis.clone(),
        transition: crate::expm::expm(&(&model.rate * dt))?,
        obs: model.obs.clone(),
    };
    let mut y_next: Vec<f64> = (0..n).flat_map(|_| f_terminal.iter().copied()).collect();
    let mut raw = vec![0.0; n * p];
    let mut y_tilde = vec![0.0; n * d];
    let mut v_targets = vec![0.0; n * d * m];
    let mut fits_rev = Vec::with_capacity(k_steps);
    for k in (0..k_steps).rev() {
        if p > 0 {
            raw.par_chunks_mut(p)
                .enumerate()
                .for_each(|(path, row)| basis.eval_into(ensemble.pi(k, path), row));
        }
        let y_fit = regression::fit(&raw, p, &y_next, d, spec.ridge)?;
        y_tilde.par_chunks_mut(d).enumerate().for_each(|(path, out)| {
            y_fit.predict_into(&raw[path * p..(path + 1) * p], out)
        });
        v_targets
            .par_chunks_mut(d * m)
            .enumerate()
            .for_each(|(path, out)| {
                let pi = ensemble.pi(k, path);
                let dz = ensemble.dz(k, path);
                for c in 0..m {
                    let pi_h: f64 = (0..d).map(|l| pi[l] * model.obs[(l, c)]).sum();
                    let innov = dz[c] - pi_h * dt;
                    for i in 0..d {
                        out[c * d + i] = (y_next[path * d + i] - y_tilde[path * d + i]) * innov / dt;
                    }
                }
            });
        let v_fit = regression::fit(&raw, p, &v_targets, d * m, spec.ridge)?;
        let fit = StepFit { y: y_fit, v: v_fit };
        let traj_ref = &traj;
        y_next.par_chunks_mut(d).enumerate().for_each_init(
            || traj_ref.new_value(),
            |value, (path, out)| {
                traj_ref.eval_fit(&fit, k, ensemble.pi(k, path), value);
                out.copy_from_slice(&value.y);
            },
        );
        if y_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverFailure(format!("non-finite backward value at step {k}")));
        }
        fits_rev.push(fit);
    }
    fits_rev.reverse();
    traj.steps = fits_rev;
    Ok(traj)
}

/// What to record while evaluating a solved trajectory on fresh paths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvaluationOptions {
    pub martingale: bool,
    pub prop1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub j_estimate: f64,
    pub j_stderr: f64,
    pub vart_estimate: f64,
    pub vart_stderr: f64,
    pub gap: f64,
    pub gap_stderr: f64,
    /// `var_0(Y_0)`, exact given the solved `Y_0`.
    pub var0: f64,
    pub y0: Vec<f64>,
    /// Pathwise mean-square error of the dual estimator `μ(Y_0) - Σ U_kᵀΔZ_k`.
    pub estimator_mse: f64,
    pub estimator_mse_stderr: f64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleReport {
    /// `E(M_{k+1} - M_k)` for each step.
    pub increments: Vec<MeanStderr>,
    /// `E(M_K - M_0)`.
    pub total: MeanStderr,
    /// Largest per-step `|mean / stderr|`.
    pub max_abs_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prop1Report {
    /// Ensemble RMS of `π_kᵀY_k - (μᵀY_0 - Σ_{j<k} U_jᵀΔZ_j)` for `k = 0..=K`.
    pub rms: Vec<f64>,
    pub terminal_rms: f64,
    pub max_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyEvaluation {
    pub gap: GapReport,
    pub martingale: Option<MartingaleReport>,
    pub prop1: Option<Prop1Report>,
}

struct PathEval {
    running: f64,
    condvar_t: f64,
    sq_error: f64,
    dm: Vec<f64>,
    residual: Vec<f64>,
}

/// `π(y)` taken as `y(0) + π(y - y(0))`, exact for constants.
fn pi_mean(pi: &[f64], y: &[f64]) -> f64 {
    y[0] + pi.iter().zip(y).map(|(p, v)| p * (v - y[0])).sum::<f64>()
}

/// Out-of-sample evaluation of a solved trajectory on `n_paths` fresh paths.
///
/// `J = var_0(Y_0) + E Σ_k c_k(X_k)` where `c_k(i)` is the one-step cost
/// `E[(Ỹ_k(X') - E Ỹ_k(X'))² + |U_k + V_k(X', ·)|² dt | X = i]` under the exact
/// transition; it is the grid version of `(ΓY + |U + V|²) dt`. `var_T` is
/// `E var(f | π_T)` on the same paths, so the gap is a paired difference.
/// The martingale increments are `var(Y_{k+1}|π_{k+1}) - var(Y_k|π_k) - π_k(c_k)`.
pub fn evaluate_trajectory(
    model: &FiniteModel,
    traj: &DualTrajectory,
    n_paths: usize,
    seed: u64,
    options: EvaluationOptions,
) -> Result<PolicyEvaluation> {
    if n_paths < 2 {
        return Err(Error::InvalidArgument("evaluation needs at least two paths".into()));
    }
    check_terminal(model, &traj.f_terminal)?;
    let grid = traj.grid;
    let (d, m, k_steps) = (model.d(), model.m(), grid.steps());
    let filter = SplittingFilter::new(model, grid.dt())?;
    let f = traj.f_terminal.as_slice();
    let mu = model.prior.as_slice();
    let y0 = traj.initial_value(&model.prior);
    let var0 = conditional_variance_slice(mu, y0.as_slice());
    let mu_y0 = pi_mean(mu, y0.as_slice());

    let map = |path: u64| -> Result<PathEval> {
        let mut rng = path_stream(seed, StreamRole::Evaluation, path);
        let (x, z) = simulate_path(model, &grid, &mut rng);
        let mut pi = mu.to_vec();
        let mut pi_next = mu.to_vec();
        let mut scratch = vec![0.0; d];
        let mut dz = vec![0.0; m];
        let mut cur = traj.new_value();
        let mut next = traj.new_value();
        traj.eval(0, &pi, &mut cur);
        let mut out = PathEval {
            running: 0.0,
            condvar_t: 0.0,
            sq_error: 0.0,
            dm: Vec::with_capacity(if options.martingale { k_steps } else { 0 }),
            residual: Vec::with_capacity(if options.prop1 { k_steps + 1 } else { 0 }),
        };
        let mut estimate = mu_y0;
        if options.prop1 {
            out.residual.push(pi_mean(&pi, &cur.y) - estimate);
        }
        for k in 0..k_steps {
            for (c, v) in dz.iter_mut().enumerate() {
                *v = z.increments[(k, c)];
            }
            out.running += traj.one_step_cost(&cur, x.grid_states[k]);
            estimate -= (0..m).map(|c| cur.u[c] * dz[c]).sum::<f64>();
            pi_next.copy_from_slice(&pi);
            filter.step_in_place(&mut pi_next, &mut scratch, &dz)?;
            traj.eval(k + 1, &pi_next, &mut next);
            if options.martingale {
                let ell: f64 = (0..d).map(|i| pi[i] * traj.one_step_cost(&cur, i)).sum();
                out.dm.push(
                    conditional_variance_slice(&pi_next, &next.y)
                        - conditional_variance_slice(&pi, &cur.y)
                        - ell,
                );
            }
            if options.prop1 {
                out.residual.push(pi_mean(&pi_next, &next.y) - estimate);
            }
            std::mem::swap(&mut cur, &mut next);
            std::mem::swap(&mut pi, &mut pi_next);
        }
        out.condvar_t = conditional_variance_slice(&pi, f);
        out.sq_error = (f[x.terminal_state()] - estimate).powi(2);
        Ok(out)
    };

    let mut running = Welford::default();
    let mut condvar = Welford::default();
    let mut paired = Welford::default();
    let mut mse = Welford::default();
    let mut dm = vec![Welford::default(); if options.martingale { k_steps } else { 0 }];
    let mut dm_total = Welford::default();
    let mut resid_sq = vec![0.0; if options.prop1 { k_steps + 1 } else { 0 }];
    map_fold_paths(n_paths, map, |_, e| {
        running.push(e.running);
        condvar.push(e.condvar_t);
        paired.push(var0 + e.running - e.condvar_t);
        mse.push(e.sq_error);
        for (w, x) in dm.iter_mut().zip(&e.dm) {
            w.push(*x);
        }
        if options.martingale {
            dm_total.push(e.dm.iter().sum());
        }
        for (acc, r) in resid_sq.iter_mut().zip(&e.residual) {
            *acc += r * r;
        }
    })?;

    let (running, condvar, paired, mse) = (running.finish(), condvar.finish(), paired.finish(), mse.finish());
    let gap = GapReport {
        j_estimate: var0 + running.mean,
        j_stderr: running.stderr,
        vart_estimate: condvar.mean,
        vart_stderr: condvar.stderr,
        gap: paired.mean,
        gap_stderr: paired.stderr,
        var0,
        y0: y0.iter().copied().collect(),
        estimator_mse: mse.mean,
        estimator_mse_stderr: mse.stderr,
        n_paths,
    };
    let martingale = options.martingale.then(|| {
        let increments: Vec<MeanStderr> = dm.iter().map(Welford::finish).collect();
        let max_abs_z = increments.iter().map(|s| s.z_score(0.0).abs()).fold(0.0, f64::max);
        MartingaleReport {
            increments,
            total: dm_total.finish(),
            max_abs_z,
        }
    });
    let prop1 = options.prop1.then(|| {
        let rms: Vec<f64> = resid_sq.iter().map(|s| (s / n_paths as f64).sqrt()).collect();
        Prop1Report {
            terminal_rms: *rms.last().unwrap(),
            max_rms: rms.iter().copied().fold(0.0, f64::max),
            rms,
        }
    });
    Ok(PolicyEvaluation {
        gap,
        martingale,
        prop1,
    })
}

/// Fits on a training ensemble, then evaluates on an independent one; both
/// use `n_paths` paths from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn solve_and_evaluate(
    model: &FiniteModel,
    f_terminal: &DVector<f64>,
    policy: &Policy,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    spec: &RegressionSpec,
    options: EvaluationOptions,
) -> Result<(DualTrajectory, PolicyEvaluation)> {
    let ensemble = PathEnsemble::simulate(model, grid, n_paths, seed, StreamRole::Training, false)?;
    let traj = lsmc_backward_solve(model, f_terminal, policy, &ensemble, spec)?;
    drop(ensemble);
    let eval = evaluate_trajectory(model, &traj, n_paths, seed, options)?;
    Ok((traj, eval))
}

pub fn duality_gap_report(
    model: &FiniteModel,
    f_terminal: &DVector<f64>,
    policy: &Policy,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    spec: &RegressionSpec,
) -> Result<GapReport> {
    if n_paths < 1000 {
        return Err(Error::InvalidArgument(format!(
            "gap report needs at least 1000 paths, got {n_paths}"
        )));
    }
    let (_, eval) = solve_and_evaluate(
        model,
        f_terminal,
        policy,
        grid,
        n_paths,
        seed,
        spec,
        EvaluationOptions::default(),
    )?;
    Ok(eval.gap)
}

pub fn martingale_drift_check(
    model: &FiniteModel,
    f_terminal: &DVector<f64>,
    policy: &Policy,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    spec: &RegressionSpec,
) -> Result<MartingaleReport> {
    let options = EvaluationOptions {
        martingale: true,
        prop1: false,
    };
    let (_, eval) = solve_and_evaluate(model, f_terminal, policy, grid, n_paths, seed, spec, options)?;
    Ok(eval.martingale.expect("requested"))
}

pub fn prop1_trajectory_check(
    model: &FiniteModel,
    f_terminal: &DVector<f64>,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    spec: &RegressionSpec,
) -> Result<Prop1Report> {
    let options = EvaluationOptions {
        martingale: false,
        prop1: true,
    };
    let (_, eval) =
        solve_and_evaluate(model, f_terminal, &Policy::Optimal, grid, n_paths, seed, spec, options)?;
    Ok(eval.prop1.expect("requested"))
}
