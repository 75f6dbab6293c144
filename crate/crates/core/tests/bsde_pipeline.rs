use dualfilt::bsde::{
    lsmc_backward_solve, solve_and_evaluate, EvaluationOptions, PathEnsemble, Policy, RegressionSpec,
};
use dualfilt::rng::StreamRole;
use dualfilt::{Error, FiniteModel, TimeGrid};
use nalgebra::{DMatrix, DVector};

fn spec() -> RegressionSpec {
    RegressionSpec::default()
}

#[test]
fn blind_observations_give_no_martingale_part() {
    let base = FiniteModel::canonical_two_state();
    let model = FiniteModel::new(base.rate.clone(), DMatrix::zeros(2, 1), base.prior.clone()).unwrap();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let f = DVector::from_vec(vec![0.0, 1.0]);
    let ens = PathEnsemble::simulate(&model, &grid, 2000, 4, StreamRole::Training, false).unwrap();
    let traj = lsmc_backward_solve(&model, &f, &Policy::Optimal, &ens, &spec()).unwrap();
    for p in [0usize, 999] {
        for v in traj.materialize(&ens, p) {
            assert!(v.v.iter().all(|x| x.abs() < 1e-12));
            assert!(v.u.iter().all(|x| x.abs() < 1e-12));
        }
    }
}

#[test]
fn constant_terminal_costs_nothing() {
    let model = FiniteModel::canonical_two_state();
    let grid = TimeGrid::new(1.0, 30).unwrap();
    let f = DVector::from_element(2, -1.5);
    let options = EvaluationOptions {
        martingale: true,
        prop1: true,
    };
    let (_, e) = solve_and_evaluate(&model, &f, &Policy::Optimal, &grid, 2000, 3, &spec(), options).unwrap();
    assert_eq!(e.gap.j_estimate, 0.0);
    assert_eq!(e.gap.vart_estimate, 0.0);
    assert_eq!(e.martingale.unwrap().total.mean, 0.0);
    assert_eq!(e.prop1.unwrap().max_rms, 0.0);
}

#[test]
fn perturbation_costs_its_energy() {
    let model = FiniteModel::canonical_two_state();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let f = DVector::from_vec(vec![0.0, 1.0]);
    let delta = 0.5;
    let (_, e) =
        solve_and_evaluate(&model, &f, &Policy::Perturbed { delta }, &grid, 20_000, 5, &spec(), Default::default())
            .unwrap();
    let energy = delta * delta * grid.horizon();
    assert!(e.gap.gap > 0.5 * energy - 3.0 * e.gap.gap_stderr, "{:?}", e.gap);
    // the excess is the control energy up to an O(dt) time-stepping error
    let rel = (e.gap.gap / energy - 1.0).abs();
    assert!(rel <= 2.0 * grid.dt() + 3.0 * e.gap.gap_stderr / energy, "{rel}");
}

#[test]
fn optimal_policy_nearly_closes_the_gap() {
    let model = FiniteModel::canonical_two_state();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let f = DVector::from_vec(vec![0.0, 1.0]);
    let (_, opt) =
        solve_and_evaluate(&model, &f, &Policy::Optimal, &grid, 20_000, 6, &spec(), Default::default()).unwrap();
    let zero = Policy::OpenLoop { u: DMatrix::zeros(50, 1) };
    let (_, open) = solve_and_evaluate(&model, &f, &zero, &grid, 20_000, 6, &spec(), Default::default()).unwrap();
    assert!(opt.gap.gap.abs() < 4.0 * opt.gap.gap_stderr + 1e-3, "{:?}", opt.gap);
    assert!(opt.gap.j_estimate < open.gap.j_estimate);
    assert!((open.gap.j_estimate - 0.25).abs() < 1e-12);
}

#[test]
fn too_many_features_for_the_ensemble() {
    let model = FiniteModel::canonical_two_state();
    let grid = TimeGrid::new(1.0, 5).unwrap();
    let ens = PathEnsemble::simulate(&model, &grid, 20, 1, StreamRole::Training, false).unwrap();
    let r = lsmc_backward_solve(&model, &DVector::from_vec(vec![0.0, 1.0]), &Policy::Optimal, &ens, &spec());
    assert!(matches!(r, Err(Error::FeatureCountTooLarge { .. })));
}
