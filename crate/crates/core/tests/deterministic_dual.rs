use approx::assert_relative_eq;
use dualfilt::deterministic::{
    exact_cost, optimize_deterministic_control, solve_backward_dual_ode, verify_duality_principle,
    DeterministicControl,
};
use dualfilt::hmm::forward_marginal;
use dualfilt::{FiniteModel, TimeGrid};
use nalgebra::{DMatrix, DVector};

fn three_state() -> FiniteModel {
    let a = DMatrix::from_row_slice(3, 3, &[-1.0, 0.6, 0.4, 0.5, -1.0, 0.5, 0.2, 1.3, -1.5]);
    let h = DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 1.5]);
    FiniteModel::new(a, h, DVector::from_vec(vec![0.3, 0.3, 0.4])).unwrap()
}

#[test]
fn zero_control_cost_is_terminal_variance() {
    let model = three_state();
    let f = DVector::from_vec(vec![1.0, -0.5, 2.0]);
    let grid = TimeGrid::new(0.8, 2000).unwrap();
    let u = DeterministicControl::zeros(&grid, 1);
    let sol = solve_backward_dual_ode(&model, &f, &u, &grid).unwrap();
    let cost = exact_cost(&model, &sol, &u, &grid).unwrap();
    let rho = forward_marginal(&model, 0.8).unwrap();
    let mean = rho.dot(&f);
    let var = rho.dot(&f.map(|v| (v - mean).powi(2)));
    assert_relative_eq!(cost.total, var, epsilon = 1e-6);
}

#[test]
fn monte_carlo_agrees_with_quadrature() {
    let model = three_state();
    let f = DVector::from_vec(vec![1.0, -0.5, 2.0]);
    let grid = TimeGrid::new(0.8, 400).unwrap();
    for value in [0.0, -0.3] {
        let u = DeterministicControl::constant(&grid, &[value]);
        let r = verify_duality_principle(&model, &f, &u, &grid, 40_000, 12).unwrap();
        let (mc, se) = (r.mc_mean.unwrap(), r.mc_stderr.unwrap());
        assert!((mc - r.total).abs() <= 4.0 * se + 2e-3, "u={value}: {mc} ± {se} vs {}", r.total);
    }
}

#[test]
fn optimized_control_beats_neighbours() {
    let model = FiniteModel::canonical_two_state();
    let f = DVector::from_vec(vec![0.0, 1.0]);
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let best = optimize_deterministic_control(&model, &f, &grid).unwrap();
    let cost_of = |u: &DeterministicControl| {
        let sol = solve_backward_dual_ode(&model, &f, u, &grid).unwrap();
        exact_cost(&model, &sol, u, &grid).unwrap().total
    };
    assert_relative_eq!(cost_of(&best.control), best.report.total, epsilon = 1e-12);
    assert!(best.report.total < cost_of(&DeterministicControl::zeros(&grid, 1)));
    for k in [0usize, 37, 99] {
        for eps in [1e-2, -1e-2] {
            let mut u = best.control.clone();
            u.u[(k, 0)] += eps;
            assert!(cost_of(&u) >= best.report.total - 1e-12);
        }
    }
}

#[test]
fn rejects_small_ensembles() {
    let model = FiniteModel::canonical_two_state();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let u = DeterministicControl::zeros(&grid, 1);
    assert!(verify_duality_principle(&model, &DVector::from_vec(vec![0.0, 1.0]), &u, &grid, 10, 1).is_err());
}
