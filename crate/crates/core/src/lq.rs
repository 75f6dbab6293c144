//! Linear-Gaussian model: Kalman-Bucy minimum-variance dual, minimum-energy
//! dual and the mean/variance split of the relative-entropy formulation.
//!
//! Model: `dX = AᵀX dt + σ dB`, `dZ = HᵀX dt + dW`, `X_0 ~ N(m0, Σ0)`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filters::riccati_rk4;
use crate::grid::TimeGrid;
use crate::hmm::ObservationPath;

const SYM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LGModel {
    /// `d x d`; the drift is `Aᵀx`.
    pub a: DMatrix<f64>,
    /// `d x m`.
    pub h: DMatrix<f64>,
    /// `d x p` process-noise loading.
    pub sigma: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
}

impl LGModel {
    pub fn new(
        a: DMatrix<f64>,
        h: DMatrix<f64>,
        sigma: DMatrix<f64>,
        m0: DVector<f64>,
        sigma0: DMatrix<f64>,
    ) -> Result<Self> {
        let d = a.nrows();
        if d == 0 {
            return Err(Error::InvalidArgument("state dimension must be positive".into()));
        }
        let dims = [
            ("A columns", d, a.ncols()),
            ("H rows", d, h.nrows()),
            ("sigma rows", d, sigma.nrows()),
            ("m0 length", d, m0.len()),
            ("Sigma0 rows", d, sigma0.nrows()),
            ("Sigma0 columns", d, sigma0.ncols()),
        ];
        for (what, expected, got) in dims {
            if expected != got {
                return Err(Error::DimensionMismatch {
                    what,
                    expected,
                    got,
                });
            }
        }
        if h.ncols() == 0 || sigma.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "H and sigma need at least one column".into(),
            ));
        }
        for (name, finite) in [
            ("A", a.iter().all(|x| x.is_finite())),
            ("H", h.iter().all(|x| x.is_finite())),
            ("sigma", sigma.iter().all(|x| x.is_finite())),
            ("m0", m0.iter().all(|x| x.is_finite())),
            ("Sigma0", sigma0.iter().all(|x| x.is_finite())),
        ] {
            if !finite {
                return Err(Error::NonFinite(name.into()));
            }
        }
        if (&sigma0 - sigma0.transpose()).amax() > SYM_TOL {
            return Err(Error::InvalidArgument("Sigma0 is not symmetric".into()));
        }
        let min_eig = sigma0.clone().symmetric_eigenvalues().min();
        if min_eig < -SYM_TOL {
            return Err(Error::InvalidArgument(format!(
                "Sigma0 has negative eigenvalue {min_eig}"
            )));
        }
        Ok(LGModel {
            a,
            h,
            sigma,
            m0,
            sigma0,
        })
    }

    /// Scalar model `A = 0`, `σ = 1`, `H = 1`, `Σ0 = 1`, `m0 = 0.5`.
    pub fn scalar_canonical() -> Self {
        LGModel {
            a: DMatrix::zeros(1, 1),
            h: DMatrix::from_element(1, 1, 1.0),
            sigma: DMatrix::from_element(1, 1, 1.0),
            m0: DVector::from_element(1, 0.5),
            sigma0: DMatrix::from_element(1, 1, 1.0),
        }
    }

    /// Random model whose drift `Aᵀ` has spectral abscissa below -0.5.
    pub fn random_stable<R: Rng + ?Sized>(rng: &mut R, d: usize, m: usize, p: usize) -> Self {
        let mut normal = |r, c, scale: f64| {
            DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let g = normal(d, d, 1.0 / (d as f64).sqrt());
        let shift = g.norm() + 0.5;
        let a = g - DMatrix::identity(d, d) * shift;
        let h = normal(d, m, 1.0);
        let sigma = normal(d, p, 0.7);
        let l = normal(d, d, 0.5);
        let sigma0 = &l * l.transpose() + DMatrix::identity(d, d) * 0.1;
        let sigma0 = (&sigma0 + sigma0.transpose()) * 0.5;
        let m0 = normal(d, 1, 1.0).column(0).into_owned();
        LGModel {
            a,
            h,
            sigma,
            m0,
            sigma0,
        }
    }

    pub fn d(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.h.ncols()
    }

    pub fn p(&self) -> usize {
        self.sigma.ncols()
    }
}

fn check_vec(what: &'static str, expected: usize, v: &DVector<f64>) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

/// Riccati covariance at every grid time, RK4 with step `dt`.
pub fn solve_kalman_dre(lg: &LGModel, grid: &TimeGrid) -> Result<Vec<DMatrix<f64>>> {
    riccati_on_steps(lg, grid.steps(), grid.dt())
}

fn riccati_on_steps(lg: &LGModel, steps: usize, dt: f64) -> Result<Vec<DMatrix<f64>>> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut s = lg.sigma0.clone();
    out.push(s.clone());
    for _ in 0..steps {
        s = riccati_rk4(lg, &s, dt)?;
        out.push(s.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MVDualSolution {
    pub y: Vec<DVector<f64>>,
    /// Control on each cell, evaluated at the left endpoint.
    pub u: Vec<DVector<f64>>,
    pub value: f64,
    /// `fᵀ Σ_T f`, the optimal value predicted by the Riccati solution.
    pub terminal_variance: f64,
}

impl MVDualSolution {
    /// `|value - fᵀΣ_T f|`.
    pub fn certificate_residual(&self) -> f64 {
        (self.value - self.terminal_variance).abs()
    }
}

/// Closes the dual with the feedback `u = -HᵀΣ_t y_t` and integrates
/// `-ẏ = (A - H Hᵀ Σ_t) y` backward by RK4. The Riccati solution is taken on
/// a half-step grid so each RK4 stage sees an exact covariance.
pub fn solve_min_variance_dual(
    lg: &LGModel,
    f: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<MVDualSolution> {
    check_vec("terminal vector", lg.d(), f)?;
    let k_steps = grid.steps();
    let dt = grid.dt();
    let fine = riccati_on_steps(lg, 2 * k_steps, dt / 2.0)?;
    let hht = &lg.h * lg.h.transpose();
    let rhs = |s: &DMatrix<f64>, y: &DVector<f64>| -> DVector<f64> {
        // dy/dt = -(A - H Hᵀ Σ) y
        -(&lg.a * y) + &hht * (s * y)
    };
    let mut y = vec![DVector::zeros(lg.d()); k_steps + 1];
    y[k_steps] = f.clone();
    for k in (0..k_steps).rev() {
        let (s0, sm, s1) = (&fine[2 * k], &fine[2 * k + 1], &fine[2 * k + 2]);
        let yk1 = &y[k + 1];
        let h = -dt;
        let k1 = rhs(s1, yk1);
        let k2 = rhs(sm, &(yk1 + &k1 * (h / 2.0)));
        let k3 = rhs(sm, &(yk1 + &k2 * (h / 2.0)));
        let k4 = rhs(s0, &(yk1 + &k3 * h));
        y[k] = yk1 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    let control = |k: usize| -> DVector<f64> { -(lg.h.transpose() * (&fine[2 * k] * &y[k])) };
    let sst = &lg.sigma * lg.sigma.transpose();
    let running = |k: usize| -> f64 { y[k].dot(&(&sst * &y[k])) + control(k).norm_squared() };
    let mut integral = 0.0;
    for k in 0..=k_steps {
        integral += grid.trapezoid_weight(k) * running(k);
    }
    let value = y[0].dot(&(&lg.sigma0 * &y[0])) + integral;
    let terminal_variance = f.dot(&(&fine[2 * k_steps] * f));
    let u = (0..k_steps).map(control).collect();
    Ok(MVDualSolution {
        y,
        u,
        value,
        terminal_variance,
    })
}

/// `S_T = y_0ᵀ m0 - Σ_k u_kᵀ ΔZ_k`.
pub fn recover_kalman_from_dual(
    lg: &LGModel,
    f: &DVector<f64>,
    sol: &MVDualSolution,
    obs: &ObservationPath,
) -> Result<f64> {
    check_vec("terminal vector", lg.d(), f)?;
    if obs.steps() != sol.u.len() {
        return Err(Error::GridMismatch {
            expected: sol.u.len(),
            got: obs.steps(),
        });
    }
    let mut s = sol.y[0].dot(&lg.m0);
    for (k, u) in sol.u.iter().enumerate() {
        s -= obs.increments.row(k).transpose().dot(u);
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MEDualSolution {
    pub m_tilde: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub m_tilde_0: DVector<f64>,
    pub value: f64,
}

fn check_controls(lg: &LGModel, grid: &TimeGrid, u: &[DVector<f64>]) -> Result<()> {
    if u.len() != grid.steps() {
        return Err(Error::GridMismatch {
            expected: grid.steps(),
            got: u.len(),
        });
    }
    for v in u {
        check_vec("control", lg.p(), v)?;
    }
    Ok(())
}

fn prior_precision(lg: &LGModel) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(lg.sigma0.clone()).ok_or(Error::SingularPrior)?;
    let min_diag = chol.l().diagonal().min();
    if !(min_diag > 1e-12) {
        return Err(Error::SingularPrior);
    }
    Ok(chol.inverse())
}

/// Euler trajectory of `m̃' = Aᵀm̃ + σu` from `m̃_0`.
pub fn mean_trajectory(
    lg: &LGModel,
    m_tilde_0: &DVector<f64>,
    u: &[DVector<f64>],
    grid: &TimeGrid,
) -> Result<Vec<DVector<f64>>> {
    check_vec("initial mean", lg.d(), m_tilde_0)?;
    check_controls(lg, grid, u)?;
    let dt = grid.dt();
    let mut out = Vec::with_capacity(u.len() + 1);
    out.push(m_tilde_0.clone());
    for uk in u {
        let m = out.last().unwrap();
        let next = m + (lg.a.transpose() * m + &lg.sigma * uk) * dt;
        out.push(next);
    }
    Ok(out)
}

/// The discretized minimum-energy objective
/// `|m0 - m̃_0|²_{Σ0⁻¹} + Σ_k (|u_k|² + |ΔZ_k/dt - Hᵀm̃_k|²) dt`.
pub fn min_energy_objective(
    lg: &LGModel,
    obs: &ObservationPath,
    m_tilde_0: &DVector<f64>,
    u: &[DVector<f64>],
    grid: &TimeGrid,
) -> Result<f64> {
    obs.check_grid(grid)?;
    let prec = prior_precision(lg)?;
    let traj = mean_trajectory(lg, m_tilde_0, u, grid)?;
    Ok(objective_on_trajectory(lg, obs, &prec, &traj, u, grid.dt()))
}

fn objective_on_trajectory(
    lg: &LGModel,
    obs: &ObservationPath,
    prec: &DMatrix<f64>,
    traj: &[DVector<f64>],
    u: &[DVector<f64>],
    dt: f64,
) -> f64 {
    let e0 = &lg.m0 - &traj[0];
    let mut value = e0.dot(&(prec * &e0));
    for (k, uk) in u.iter().enumerate() {
        let resid = obs.increments.row(k).transpose() / dt - lg.h.transpose() * &traj[k];
        value += (uk.norm_squared() + resid.norm_squared()) * dt;
    }
    value
}

/// Minimizes the discretized minimum-energy objective over `m̃_0` and the
/// controls. The Euler constraint makes this a discrete LQ tracking problem,
/// solved by a backward Riccati sweep followed by a forward pass. A zero
/// noise loading is handled exactly: the controls then have no effect.
pub fn solve_min_energy_dual(
    lg: &LGModel,
    obs: &ObservationPath,
    grid: &TimeGrid,
) -> Result<MEDualSolution> {
    obs.check_grid(grid)?;
    if obs.increments.ncols() != lg.m() {
        return Err(Error::DimensionMismatch {
            what: "observation width",
            expected: lg.m(),
            got: obs.increments.ncols(),
        });
    }
    let prec = prior_precision(lg)?;
    let (d, p, k_steps, dt) = (lg.d(), lg.p(), grid.steps(), grid.dt());
    let f = DMatrix::identity(d, d) + lg.a.transpose() * dt;
    let b = &lg.sigma * dt;
    let hht_dt = &lg.h * lg.h.transpose() * dt;

    // value-to-go V_k(m) = mᵀ P_k m - 2 q_kᵀ m + const
    let mut ps = vec![DMatrix::zeros(d, d); k_steps + 1];
    let mut qs = vec![DVector::zeros(d); k_steps + 1];
    let gain_solver = |pn: &DMatrix<f64>| -> Result<Cholesky<f64, nalgebra::Dyn>> {
        let r = DMatrix::identity(p, p) * dt + b.transpose() * pn * &b;
        Cholesky::new(r).ok_or_else(|| Error::SolverFailure("control Hessian not SPD".into()))
    };
    for k in (0..k_steps).rev() {
        let (pn, qn) = (&ps[k + 1], &qs[k + 1]);
        let r = gain_solver(pn)?;
        let bt_pf = b.transpose() * pn * &f;
        let bt_q = b.transpose() * qn;
        let pk = &hht_dt + f.transpose() * pn * &f - bt_pf.transpose() * r.solve(&bt_pf);
        let pk = (&pk + pk.transpose()) * 0.5;
        let dz = obs.increments.row(k).transpose();
        let qk = &lg.h * dz + f.transpose() * qn - bt_pf.transpose() * r.solve(&bt_q);
        ps[k] = pk;
        qs[k] = qk;
    }
    let lhs = &ps[0] + &prec;
    let chol = Cholesky::new((&lhs + lhs.transpose()) * 0.5)
        .ok_or_else(|| Error::SolverFailure("initial-condition system not SPD".into()))?;
    let m_tilde_0 = chol.solve(&(&qs[0] + &prec * &lg.m0));

    let mut m_tilde = Vec::with_capacity(k_steps + 1);
    let mut u = Vec::with_capacity(k_steps);
    m_tilde.push(m_tilde_0.clone());
    for k in 0..k_steps {
        let (pn, qn) = (&ps[k + 1], &qs[k + 1]);
        let r = gain_solver(pn)?;
        let fm = &f * &m_tilde[k];
        let uk = -r.solve(&(b.transpose() * (pn * &fm - qn)));
        let next = &m_tilde[k] + (lg.a.transpose() * &m_tilde[k] + &lg.sigma * &uk) * dt;
        u.push(uk);
        m_tilde.push(next);
    }
    if m_tilde.iter().any(|m| m.iter().any(|x| !x.is_finite())) {
        return Err(Error::SolverFailure("non-finite minimum-energy trajectory".into()));
    }
    let value = objective_on_trajectory(lg, obs, &prec, &m_tilde, &u, dt);
    Ok(MEDualSolution {
        m_tilde,
        u,
        m_tilde_0,
        value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MitterNewtonCosts {
    /// Mean cost.
    pub j1: f64,
    /// Variance cost.
    pub j2: f64,
    pub m_tilde: Vec<DVector<f64>>,
    pub sigma_tilde: Vec<DMatrix<f64>>,
}

/// Splits the linear-Gaussian relative-entropy cost into the mean part `J1`
/// and the variance part `J2`, with `Σ̃_0 = Σ0`.
///
/// `J1` is assembled from the un-integrated running cost
/// `½|u|² + ½|Hᵀm̃|² + z_t Hᵀ(Aᵀm̃ + σu)` minus the terminal term `z_T Hᵀm̃_T`,
/// plus the observation energy `½ Σ|ΔZ_k|²/dt` that the integration by parts
/// produces. It therefore equals half the minimum-energy objective.
/// `gains[k]` is the `p x d` feedback gain on cell `k`.
pub fn mitter_newton_lg_decompose(
    lg: &LGModel,
    obs: &ObservationPath,
    m_tilde_0: &DVector<f64>,
    u: &[DVector<f64>],
    gains: &[DMatrix<f64>],
    grid: &TimeGrid,
) -> Result<MitterNewtonCosts> {
    obs.check_grid(grid)?;
    let prec = prior_precision(lg)?;
    let (d, p, k_steps, dt) = (lg.d(), lg.p(), grid.steps(), grid.dt());
    if gains.len() != k_steps {
        return Err(Error::GridMismatch {
            expected: k_steps,
            got: gains.len(),
        });
    }
    for g in gains {
        if g.nrows() != p || g.ncols() != d {
            return Err(Error::DimensionMismatch {
                what: "gain matrix size",
                expected: p * d,
                got: g.nrows() * g.ncols(),
            });
        }
    }
    let m_tilde = mean_trajectory(lg, m_tilde_0, u, grid)?;

    let e0 = &lg.m0 - m_tilde_0;
    let mut j1 = 0.5 * e0.dot(&(&prec * &e0));
    for k in 0..k_steps {
        let hm = lg.h.transpose() * &m_tilde[k];
        let z_next = obs.cumulative.row(k + 1).transpose();
        let drift = lg.a.transpose() * &m_tilde[k] + &lg.sigma * &u[k];
        let coupling = z_next.dot(&(lg.h.transpose() * drift));
        j1 += (0.5 * u[k].norm_squared() + 0.5 * hm.norm_squared() + coupling) * dt;
        j1 += 0.5 * obs.increments.row(k).norm_squared() / dt;
    }
    let z_t = obs.cumulative.row(k_steps).transpose();
    j1 -= z_t.dot(&(lg.h.transpose() * &m_tilde[k_steps]));

    let sst = &lg.sigma * lg.sigma.transpose();
    let hht = &lg.h * lg.h.transpose();
    let mut sigma_tilde = Vec::with_capacity(k_steps + 1);
    sigma_tilde.push(lg.sigma0.clone());
    let det0 = lg.sigma0.determinant();
    let mut j2 = 0.5 * det0.ln() + 0.5 * (&lg.sigma0 * &prec).trace();
    for (k, g) in gains.iter().enumerate() {
        let closed = lg.a.transpose() + &lg.sigma * g;
        let rhs = |s: &DMatrix<f64>| -> DMatrix<f64> {
            &closed * s + s * closed.transpose() + &sst
        };
        let s = &sigma_tilde[k];
        let k1 = rhs(s);
        let k2 = rhs(&(s + &k1 * (dt / 2.0)));
        let k3 = rhs(&(s + &k2 * (dt / 2.0)));
        let k4 = rhs(&(s + &k3 * dt));
        let next = s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        let next = (&next + next.transpose()) * 0.5;
        let ktk = g.transpose() * g;
        let integrand = |s: &DMatrix<f64>| 0.5 * (&ktk * s).trace() + 0.5 * (&hht * s).trace();
        j2 += 0.5 * dt * (integrand(s) + integrand(&next));
        sigma_tilde.push(next);
    }
    if !(j1.is_finite() && j2.is_finite()) {
        return Err(Error::SolverFailure("non-finite decomposition cost".into()));
    }
    Ok(MitterNewtonCosts {
        j1,
        j2,
        m_tilde,
        sigma_tilde,
    })
}

/// Draws `X_0 ~ N(m0, Σ0)`, then Euler-Maruyama for the state and
/// `ΔZ_k = HᵀX_k dt + ΔW_k`.
pub fn simulate_lg_path<R: Rng + ?Sized>(
    lg: &LGModel,
    grid: &TimeGrid,
    rng: &mut R,
) -> (Vec<DVector<f64>>, ObservationPath) {
    let (d, m, p) = (lg.d(), lg.m(), lg.p());
    let (k_steps, dt) = (grid.steps(), grid.dt());
    let sd = dt.sqrt();
    let eig = lg.sigma0.clone().symmetric_eigen();
    let root = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    let mut std_normal = |n: usize| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x0 = &lg.m0 + &root * std_normal(d);
    let mut xs = Vec::with_capacity(k_steps + 1);
    xs.push(x0);
    let mut increments = DMatrix::zeros(k_steps, m);
    let mut noise = DMatrix::zeros(k_steps, m);
    let mut cumulative = DMatrix::zeros(k_steps + 1, m);
    for k in 0..k_steps {
        let x = &xs[k];
        let db = std_normal(p) * sd;
        let dw = std_normal(m) * sd;
        let dz = lg.h.transpose() * x * dt + &dw;
        for c in 0..m {
            noise[(k, c)] = dw[c];
            increments[(k, c)] = dz[c];
            cumulative[(k + 1, c)] = cumulative[(k, c)] + dz[c];
        }
        let next = x + lg.a.transpose() * x * dt + &lg.sigma * db;
        xs.push(next);
    }
    (
        xs,
        ObservationPath {
            increments,
            cumulative,
            noise_increments: noise,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expm::expm;
    use crate::filters::kalman_trajectory;
    use crate::rng::{path_stream, StreamRole};
    use approx::assert_relative_eq;

    fn zero_obs(k: usize, m: usize) -> ObservationPath {
        ObservationPath {
            increments: DMatrix::zeros(k, m),
            cumulative: DMatrix::zeros(k + 1, m),
            noise_increments: DMatrix::zeros(k, m),
        }
    }

    #[test]
    fn rejects_asymmetric_prior() {
        let r = LGModel::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 1),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
        );
        assert!(r.is_err());
    }

    #[test]
    fn dre_trivial_model_is_constant() {
        let lg = LGModel::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 1),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        )
        .unwrap();
        let grid = TimeGrid::new(3.0, 30).unwrap();
        for s in solve_kalman_dre(&lg, &grid).unwrap() {
            assert_eq!(s, lg.sigma0);
        }
    }

    #[test]
    fn scalar_dre_steady_state() {
        let lg = LGModel::scalar_canonical();
        let grid = TimeGrid::new(10.0, 10_000).unwrap();
        let s = solve_kalman_dre(&lg, &grid).unwrap();
        assert!((s[10_000][(0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn scalar_dre_closed_form_with_other_prior() {
        // Σ' = 1 - Σ², Σ(0) = 2 gives Σ(t) = coth(t + acoth 2)
        let mut lg = LGModel::scalar_canonical();
        lg.sigma0[(0, 0)] = 2.0;
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let s = solve_kalman_dre(&lg, &grid).unwrap();
        let c = 0.5 * (3.0f64).ln();
        let exact = 1.0 / (1.0 + c).tanh();
        assert_relative_eq!(s[1000][(0, 0)], exact, epsilon = 1e-10);
    }

    #[test]
    fn dre_stays_symmetric_psd_for_random_models() {
        let mut rng = path_stream(11, StreamRole::Simulation, 0);
        let grid = TimeGrid::new(1.0, 200).unwrap();
        for trial in 0..50 {
            let d = 1 + trial % 4;
            let lg = LGModel::random_stable(&mut rng, d, 1 + trial % 2, 1 + trial % 3);
            for s in solve_kalman_dre(&lg, &grid).unwrap() {
                assert!((&s - s.transpose()).amax() <= 1e-10);
                assert!(s.symmetric_eigenvalues().min() >= -1e-10);
            }
        }
    }

    #[test]
    fn min_variance_zero_terminal() {
        let lg = LGModel::scalar_canonical();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let sol = solve_min_variance_dual(&lg, &DVector::zeros(1), &grid).unwrap();
        assert_eq!(sol.value, 0.0);
        assert!(sol.u.iter().all(|u| u.norm() == 0.0));
    }

    #[test]
    fn min_variance_without_observations_is_prior_variance() {
        let mut rng = path_stream(12, StreamRole::Simulation, 0);
        let mut lg = LGModel::random_stable(&mut rng, 3, 1, 2);
        lg.h = DMatrix::zeros(3, 1);
        let f = DVector::from_vec(vec![1.0, -0.5, 2.0]);
        let t = 1.0;
        let grid = TimeGrid::new(t, 2000).unwrap();
        let sol = solve_min_variance_dual(&lg, &f, &grid).unwrap();
        assert!(sol.u.iter().all(|u| u.norm() == 0.0));
        let y_at = |s: f64| expm(&(&lg.a * (t - s))).unwrap() * &f;
        let sst = &lg.sigma * lg.sigma.transpose();
        let fine = TimeGrid::new(t, 4000).unwrap();
        let vals: Vec<f64> = fine
            .times()
            .map(|s| {
                let y = y_at(s);
                y.dot(&(&sst * &y))
            })
            .collect();
        let y0 = y_at(0.0);
        let oracle = y0.dot(&(&lg.sigma0 * &y0)) + fine.trapezoid(&vals);
        assert_relative_eq!(sol.value, oracle, max_relative = 1e-6);
        assert_relative_eq!(sol.y[0], y0, epsilon = 1e-10);
    }

    #[test]
    fn min_variance_scalar_matches_riccati() {
        let lg = LGModel::scalar_canonical();
        let grid = TimeGrid::new(1.0, 10_000).unwrap();
        let sol = solve_min_variance_dual(&lg, &DVector::from_element(1, 1.0), &grid).unwrap();
        assert!(sol.certificate_residual() <= 1e-5);
    }

    // non-commuting Σ and HHᵀ: the closed-loop drift must be A - HHᵀΣ
    #[test]
    fn min_variance_matches_riccati_in_several_dimensions() {
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        for i in 0..4 {
            let mut rng = path_stream(3, StreamRole::Simulation, i);
            let lg = LGModel::random_stable(&mut rng, 3, 2, 3);
            let f = DVector::from_vec(vec![1.0, -0.5, 0.25]);
            let sol = solve_min_variance_dual(&lg, &f, &grid).unwrap();
            assert!(sol.certificate_residual() <= 1e-4 * sol.terminal_variance);
        }
    }

    #[test]
    fn min_variance_value_is_even_in_terminal() {
        let mut rng = path_stream(13, StreamRole::Simulation, 0);
        let lg = LGModel::random_stable(&mut rng, 2, 1, 1);
        let grid = TimeGrid::new(1.0, 500).unwrap();
        let f = DVector::from_vec(vec![0.3, -1.2]);
        let a = solve_min_variance_dual(&lg, &f, &grid).unwrap().value;
        let b = solve_min_variance_dual(&lg, &(-&f), &grid).unwrap().value;
        assert_eq!(a, b);
    }

    #[test]
    fn recovery_without_observation_is_prior_mean() {
        let mut rng = path_stream(14, StreamRole::Simulation, 0);
        let mut lg = LGModel::random_stable(&mut rng, 2, 1, 1);
        lg.h = DMatrix::zeros(2, 1);
        let f = DVector::from_vec(vec![1.0, 2.0]);
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let sol = solve_min_variance_dual(&lg, &f, &grid).unwrap();
        let (_, obs) = simulate_lg_path(&lg, &grid, &mut rng);
        let s = recover_kalman_from_dual(&lg, &f, &sol, &obs).unwrap();
        let prior_mean = f.dot(&(expm(&lg.a.transpose()).unwrap() * &lg.m0));
        assert_relative_eq!(s, prior_mean, epsilon = 1e-10);
        let zero = solve_min_variance_dual(&lg, &DVector::zeros(2), &grid).unwrap();
        assert_eq!(recover_kalman_from_dual(&lg, &DVector::zeros(2), &zero, &obs).unwrap(), 0.0);
    }

    #[test]
    fn recovery_matches_kalman_on_a_path() {
        let lg = LGModel::scalar_canonical();
        let grid = TimeGrid::new(1.0, 10_000).unwrap();
        let f = DVector::from_element(1, 1.0);
        let sol = solve_min_variance_dual(&lg, &f, &grid).unwrap();
        let (_, obs) = simulate_lg_path(&lg, &grid, &mut path_stream(15, StreamRole::Simulation, 0));
        let s = recover_kalman_from_dual(&lg, &f, &sol, &obs).unwrap();
        let kf = kalman_trajectory(&lg, &obs, grid.dt()).unwrap();
        assert!((s - kf[10_000].mean[0]).abs() < 1e-3);
        assert!(matches!(
            recover_kalman_from_dual(&lg, &f, &sol, &zero_obs(10, 1)),
            Err(Error::GridMismatch { .. })
        ));
    }

    #[test]
    fn min_energy_zero_data() {
        let mut lg = LGModel::scalar_canonical();
        lg.m0 = DVector::zeros(1);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let sol = solve_min_energy_dual(&lg, &zero_obs(50, 1), &grid).unwrap();
        assert!(sol.m_tilde.iter().all(|m| m.norm() == 0.0));
        assert!(sol.u.iter().all(|u| u.norm() == 0.0));
        assert_eq!(sol.value, 0.0);
    }

    #[test]
    fn min_energy_without_process_noise() {
        let mut rng = path_stream(16, StreamRole::Simulation, 0);
        let mut lg = LGModel::random_stable(&mut rng, 2, 1, 1);
        lg.sigma = DMatrix::zeros(2, 1);
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let (_, obs) = simulate_lg_path(&lg, &grid, &mut rng);
        let sol = solve_min_energy_dual(&lg, &obs, &grid).unwrap();
        let f = DMatrix::identity(2, 2) + lg.a.transpose() * grid.dt();
        for k in 0..200 {
            assert_relative_eq!(sol.m_tilde[k + 1], &f * &sol.m_tilde[k], epsilon = 1e-12);
        }
        // perturbing the initial point only increases the objective
        let u = sol.u.clone();
        for dir in [DVector::from_vec(vec![1e-3, 0.0]), DVector::from_vec(vec![0.0, -1e-3])] {
            let j = min_energy_objective(&lg, &obs, &(&sol.m_tilde_0 + dir), &u, &grid).unwrap();
            assert!(j > sol.value);
        }
    }

    #[test]
    fn min_energy_singular_prior() {
        let mut lg = LGModel::scalar_canonical();
        lg.sigma0 = DMatrix::zeros(1, 1);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        assert_eq!(
            solve_min_energy_dual(&lg, &zero_obs(10, 1), &grid).unwrap_err(),
            Error::SingularPrior
        );
    }

    #[test]
    fn min_energy_is_a_minimizer() {
        let mut rng = path_stream(17, StreamRole::Simulation, 0);
        let lg = LGModel::random_stable(&mut rng, 2, 2, 2);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let (_, obs) = simulate_lg_path(&lg, &grid, &mut rng);
        let sol = solve_min_energy_dual(&lg, &obs, &grid).unwrap();
        let direct = min_energy_objective(&lg, &obs, &sol.m_tilde_0, &sol.u, &grid).unwrap();
        assert_relative_eq!(direct, sol.value, max_relative = 1e-12);
        for trial in 0..20 {
            let mut u = sol.u.clone();
            let k = (trial * 7) % 100;
            u[k] += DVector::from_fn(2, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
            let j = min_energy_objective(&lg, &obs, &sol.m_tilde_0, &u, &grid).unwrap();
            assert!(j >= sol.value);
        }
    }

    #[test]
    fn min_energy_terminal_matches_kalman() {
        let lg = LGModel::scalar_canonical();
        let grid = TimeGrid::new(1.0, 10_000).unwrap();
        let (_, obs) = simulate_lg_path(&lg, &grid, &mut path_stream(18, StreamRole::Simulation, 0));
        let sol = solve_min_energy_dual(&lg, &obs, &grid).unwrap();
        let kf = kalman_trajectory(&lg, &obs, grid.dt()).unwrap();
        assert!((sol.m_tilde[10_000][0] - kf[10_000].mean[0]).abs() < 1e-3);
    }

    #[test]
    fn decomposition_zero_data() {
        let mut rng = path_stream(19, StreamRole::Simulation, 0);
        let lg = LGModel::random_stable(&mut rng, 2, 1, 1);
        let grid = TimeGrid::new(1.0, 2000).unwrap();
        let u = vec![DVector::zeros(1); 2000];
        let gains = vec![DMatrix::zeros(1, 2); 2000];
        let mn = mitter_newton_lg_decompose(&lg, &zero_obs(2000, 1), &lg.m0, &u, &gains, &grid)
            .unwrap();
        let vals: Vec<f64> = grid
            .times()
            .map(|t| {
                let m = expm(&(lg.a.transpose() * t)).unwrap() * &lg.m0;
                0.5 * (lg.h.transpose() * m).norm_squared()
            })
            .collect();
        assert_relative_eq!(mn.j1, grid.trapezoid(&vals), max_relative = 1e-2);

        let mut centered = lg.clone();
        centered.m0 = DVector::zeros(2);
        let mn0 = mitter_newton_lg_decompose(
            &centered,
            &zero_obs(2000, 1),
            &centered.m0,
            &u,
            &gains,
            &grid,
        )
        .unwrap();
        assert_eq!(mn0.j1, 0.0);
    }

    #[test]
    fn decomposition_mean_cost_is_half_objective() {
        let lg = LGModel::scalar_canonical();
        let grid = TimeGrid::new(1.0, 500).unwrap();
        let mut rng = path_stream(20, StreamRole::Simulation, 0);
        let (_, obs) = simulate_lg_path(&lg, &grid, &mut rng);
        for _ in 0..10 {
            let m0t = DVector::from_element(1, rng.sample::<f64, _>(StandardNormal));
            let u: Vec<_> = (0..500)
                .map(|_| DVector::from_element(1, rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let gains = vec![DMatrix::zeros(1, 1); 500];
            let mn = mitter_newton_lg_decompose(&lg, &obs, &m0t, &u, &gains, &grid).unwrap();
            let obj = min_energy_objective(&lg, &obs, &m0t, &u, &grid).unwrap();
            assert!((2.0 * mn.j1 - obj).abs() <= 1e-8 * (1.0 + obj));
        }
    }

    #[test]
    fn decomposition_is_uncoupled() {
        let lg = LGModel::scalar_canonical();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let mut rng = path_stream(21, StreamRole::Simulation, 0);
        let (_, obs) = simulate_lg_path(&lg, &grid, &mut rng);
        let u: Vec<_> = (0..100).map(|k| DVector::from_element(1, (k as f64).sin())).collect();
        let g0 = vec![DMatrix::zeros(1, 1); 100];
        let g1: Vec<_> = (0..100).map(|k| DMatrix::from_element(1, 1, -(k as f64) / 50.0)).collect();
        let a = mitter_newton_lg_decompose(&lg, &obs, &lg.m0, &u, &g0, &grid).unwrap();
        let b = mitter_newton_lg_decompose(&lg, &obs, &lg.m0, &u, &g1, &grid).unwrap();
        assert_eq!(a.j1.to_bits(), b.j1.to_bits());
        assert_ne!(a.j2, b.j2);
        let u2 = vec![DVector::from_element(1, 3.0); 100];
        let c = mitter_newton_lg_decompose(&lg, &obs, &DVector::zeros(1), &u2, &g1, &grid).unwrap();
        assert_eq!(b.j2.to_bits(), c.j2.to_bits());
    }

    #[test]
    fn zero_gain_variance_is_lyapunov_flow() {
        let lg = LGModel::scalar_canonical();
        let grid = TimeGrid::new(2.0, 200).unwrap();
        let u = vec![DVector::zeros(1); 200];
        let g = vec![DMatrix::zeros(1, 1); 200];
        let mn = mitter_newton_lg_decompose(&lg, &zero_obs(200, 1), &lg.m0, &u, &g, &grid).unwrap();
        // A = 0, σ = 1: Σ̃_t = 1 + t, J2 = ½ log 1 + ½ + ∫ ½(1 + t) dt
        assert_relative_eq!(mn.sigma_tilde[200][(0, 0)], 3.0, epsilon = 1e-12);
        assert_relative_eq!(mn.j2, 0.5 + 0.5 * (2.0 + 2.0), epsilon = 1e-12);
    }
}
