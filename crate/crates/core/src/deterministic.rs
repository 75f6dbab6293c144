//! Dual problem over deterministic (open-loop) controls.
//!
//! With deterministic terminal data and controls the backward equation has no
//! martingale part, so `Y_t(x) = y_tᵀ e_x` with `-ẏ = A y + H u`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::hmm::{gamma_matrices, marginals_on_grid, simulate_path, FiniteModel, ObservationPath};
use crate::rng::{path_stream, StreamRole};
use crate::stats::mean_stderr;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeterministicControl {
    /// `K x m`, row `k` is the value on cell `[t_k, t_{k+1})`.
    pub u: DMatrix<f64>,
}

impl DeterministicControl {
    pub fn zeros(grid: &TimeGrid, m: usize) -> Self {
        DeterministicControl {
            u: DMatrix::zeros(grid.steps(), m),
        }
    }

    pub fn constant(grid: &TimeGrid, value: &[f64]) -> Self {
        DeterministicControl {
            u: DMatrix::from_fn(grid.steps(), value.len(), |_, c| value[c]),
        }
    }

    pub fn steps(&self) -> usize {
        self.u.nrows()
    }

    pub fn cell(&self, k: usize) -> DVector<f64> {
        self.u.row(k).transpose()
    }

    fn check(&self, model: &FiniteModel, grid: &TimeGrid) -> Result<()> {
        if self.u.nrows() != grid.steps() {
            return Err(Error::GridMismatch {
                expected: grid.steps(),
                got: self.u.nrows(),
            });
        }
        if self.u.ncols() != model.m() {
            return Err(Error::DimensionMismatch {
                what: "control width",
                expected: model.m(),
                got: self.u.ncols(),
            });
        }
        if self.u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("control".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualOdeSolution {
    pub y: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub var0: f64,
    pub running: f64,
    pub total: f64,
    pub mc_mean: Option<f64>,
    pub mc_stderr: Option<f64>,
    pub z_score: Option<f64>,
}

/// One RK4 step of `dy/ds = A y + H u` (`s = T - t`) with `u` frozen is the
/// affine map `y_k = E y_{k+1} + G u_k`.
struct Rk4Map {
    e: DMatrix<f64>,
    g: DMatrix<f64>,
}

impl Rk4Map {
    fn new(model: &FiniteModel, dt: f64) -> Self {
        let d = model.d();
        let a = &model.rate;
        let id = DMatrix::identity(d, d);
        let a2 = a * a;
        let a3 = &a2 * a;
        let a4 = &a3 * a;
        let e = &id + a * dt + &a2 * (dt.powi(2) / 2.0) + &a3 * (dt.powi(3) / 6.0) + a4 * (dt.powi(4) / 24.0);
        let phi = &id * dt + a * (dt.powi(2) / 2.0) + a2 * (dt.powi(3) / 6.0) + a3 * (dt.powi(4) / 24.0);
        Rk4Map {
            e,
            g: phi * &model.obs,
        }
    }

    fn backward(&self, f: &DVector<f64>, u: &DMatrix<f64>) -> Vec<DVector<f64>> {
        let k_steps = u.nrows();
        let mut y = vec![DVector::zeros(f.len()); k_steps + 1];
        y[k_steps] = f.clone();
        for k in (0..k_steps).rev() {
            y[k] = &self.e * &y[k + 1] + &self.g * u.row(k).transpose();
        }
        y
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

/// RK4 solution of `-ẏ = A y + H u` from `y_T = f`, `u` piecewise constant.
pub fn solve_backward_dual_ode(
    model: &FiniteModel,
    f_terminal: &DVector<f64>,
    u: &DeterministicControl,
    grid: &TimeGrid,
) -> Result<DualOdeSolution> {
    check_terminal(model, f_terminal)?;
    u.check(model, grid)?;
    let map = Rk4Map::new(model, grid.dt());
    Ok(DualOdeSolution {
        y: map.backward(f_terminal, &u.u),
    })
}

/// `y ᵀ (diag(μ) - μμᵀ) y`.
pub fn prior_variance(prior: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let mean = prior.dot(y);
    prior
        .iter()
        .zip(y.iter())
        .map(|(p, v)| p * (v - mean).powi(2))
        .sum()
}

/// Quadrature value of the dual cost: trapezoid rule for `ρ_t(Γy_t)` with the
/// exact marginals, exact integral for the piecewise-constant `|u|²`.
pub fn exact_cost(
    model: &FiniteModel,
    sol: &DualOdeSolution,
    u: &DeterministicControl,
    grid: &TimeGrid,
) -> Result<CostReport> {
    u.check(model, grid)?;
    if sol.y.len() != grid.steps() + 1 {
        return Err(Error::GridMismatch {
            expected: grid.steps() + 1,
            got: sol.y.len(),
        });
    }
    let rhos = marginals_on_grid(model, grid)?;
    let var0 = prior_variance(&model.prior, &sol.y[0]);
    let gamma_term: Vec<f64> = rhos
        .iter()
        .zip(&sol.y)
        .map(|(rho, y)| {
            crate::hmm::weighted_carre_du_champ(&model.rate, rho.as_slice(), y.as_slice())
        })
        .collect();
    let running = grid.trapezoid(&gamma_term) + u.u.norm_squared() * grid.dt();
    Ok(CostReport {
        var0,
        running,
        total: var0 + running,
        mc_mean: None,
        mc_stderr: None,
        z_score: None,
    })
}

/// `S_T = μᵀy_0 - Σ_k u_kᵀ ΔZ_k`.
pub fn terminal_estimator(
    model: &FiniteModel,
    sol: &DualOdeSolution,
    u: &DeterministicControl,
    obs: &ObservationPath,
) -> Result<f64> {
    if obs.steps() != u.steps() {
        return Err(Error::GridMismatch {
            expected: u.steps(),
            got: obs.steps(),
        });
    }
    let mut s = model.prior.dot(&sol.y[0]);
    for k in 0..u.steps() {
        s -= u.u.row(k).dot(&obs.increments.row(k));
    }
    Ok(s)
}

/// Compares the quadrature cost with a Monte-Carlo estimate of
/// `E|f(X_T) - S_T|²` over fresh simulated paths.
pub fn verify_duality_principle(
    model: &FiniteModel,
    f_terminal: &DVector<f64>,
    u: &DeterministicControl,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<CostReport> {
    if n_paths < 100 {
        return Err(Error::InvalidArgument(format!(
            "need at least 100 paths, got {n_paths}"
        )));
    }
    let sol = solve_backward_dual_ode(model, f_terminal, u, grid)?;
    let mut report = exact_cost(model, &sol, u, grid)?;
    let errors: Vec<f64> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_stream(seed, StreamRole::Simulation, i);
            let (x, z) = simulate_path(model, grid, &mut rng);
            let s = terminal_estimator(model, &sol, u, &z).expect("grid checked above");
            (f_terminal[x.terminal_state()] - s).powi(2)
        })
        .collect();
    let ms = mean_stderr(&errors);
    report.mc_mean = Some(ms.mean);
    report.mc_stderr = Some(ms.stderr);
    report.z_score = Some(ms.z_score(report.total));
    Ok(report)
}

/// The dual cost as an explicit quadratic `J(u)` with adjoint gradients.
struct QuadraticCost {
    map: Rk4Map,
    /// `2 w_k ρ_k(Q)`: Hessian of the quadrature Γ-term in `y_k`.
    weights: Vec<DMatrix<f64>>,
    prior_cov: DMatrix<f64>,
    dt: f64,
}

impl QuadraticCost {
    fn new(model: &FiniteModel, grid: &TimeGrid) -> Result<Self> {
        let rhos = marginals_on_grid(model, grid)?;
        let gam = gamma_matrices(model);
        let weights = rhos
            .iter()
            .enumerate()
            .map(|(k, rho)| gam.combine(rho).map(|q| q * (2.0 * grid.trapezoid_weight(k))))
            .collect::<Result<Vec<_>>>()?;
        let mu = &model.prior;
        let prior_cov = DMatrix::from_diagonal(mu) - mu * mu.transpose();
        Ok(QuadraticCost {
            map: Rk4Map::new(model, grid.dt()),
            weights,
            prior_cov,
            dt: grid.dt(),
        })
    }

    fn value(&self, y: &[DVector<f64>], u: &DMatrix<f64>) -> f64 {
        let mut j = y[0].dot(&(&self.prior_cov * &y[0])) + u.norm_squared() * self.dt;
        for (w, yk) in self.weights.iter().zip(y) {
            j += 0.5 * yk.dot(&(w * yk));
        }
        j
    }

    /// Gradient of `J` with respect to the control entries, through the
    /// discrete adjoint of the RK4 recursion.
    fn gradient(&self, f: &DVector<f64>, u: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
        let y = self.map.backward(f, u);
        let k_steps = u.nrows();
        let mut grad = u * (2.0 * self.dt);
        let mut lambda = &self.prior_cov * &y[0] * 2.0 + &self.weights[0] * &y[0];
        for k in 0..k_steps {
            if k > 0 {
                lambda = &self.weights[k] * &y[k] + self.map.e.transpose() * lambda;
            }
            let gk = self.map.g.transpose() * &lambda;
            for c in 0..u.ncols() {
                grad[(k, c)] += gk[c];
            }
        }
        (grad, self.value(&y, u))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizedControl {
    pub control: DeterministicControl,
    pub report: CostReport,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Minimizes the quadrature cost over piecewise-constant controls by
/// conjugate gradients on the normal equations.
pub fn optimize_deterministic_control(
    model: &FiniteModel,
    f_terminal: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<OptimizedControl> {
    check_terminal(model, f_terminal)?;
    let cost = QuadraticCost::new(model, grid)?;
    let (k_steps, m) = (grid.steps(), model.m());
    let zero_f = DVector::zeros(model.d());
    let hess_vec = |v: &DMatrix<f64>| cost.gradient(&zero_f, v).0;

    let mut u = DMatrix::zeros(k_steps, m);
    let (g0, j0) = cost.gradient(f_terminal, &u);
    let mut r = -g0;
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    let max_iter = 10 * k_steps * m;
    let mut j = j0;
    let mut iterations = 0;
    let tol = |j: f64| 1e-8 * (1.0 + j.abs());
    while rr.sqrt() > tol(j) {
        if iterations >= max_iter {
            return Err(Error::MaxIterationsExceeded {
                iterations,
                grad_norm: rr.sqrt(),
            });
        }
        let hp = hess_vec(&p);
        let curvature = p.dot(&hp);
        if !(curvature > 0.0) {
            break;
        }
        let alpha = rr / curvature;
        u += &p * alpha;
        r -= &hp * alpha;
        let rr_new = r.norm_squared();
        p = &r + &p * (rr_new / rr);
        rr = rr_new;
        iterations += 1;
        // refresh the cost estimate used in the relative tolerance
        j = cost.value(&cost.map.backward(f_terminal, &u), &u);
    }
    let (g, _) = cost.gradient(f_terminal, &u);
    let grad_norm = g.norm();
    if grad_norm > tol(j) {
        return Err(Error::MaxIterationsExceeded {
            iterations,
            grad_norm,
        });
    }
    let control = DeterministicControl { u };
    let sol = solve_backward_dual_ode(model, f_terminal, &control, grid)?;
    let report = exact_cost(model, &sol, &control, grid)?;
    Ok(OptimizedControl {
        control,
        report,
        iterations,
        grad_norm,
    })
}
