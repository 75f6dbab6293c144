use approx::assert_relative_eq;
use dualfilt::filters::{
    conditional_variance, kalman_trajectory, wonham_trajectory, zakai_trajectory, SplittingFilter,
};
use dualfilt::hmm::{forward_marginal, simulate_path};
use dualfilt::lq::{simulate_lg_path, solve_kalman_dre, LGModel};
use dualfilt::rng::{path_stream, StreamRole};
use dualfilt::stats::Welford;
use dualfilt::{FiniteModel, TimeGrid};
use nalgebra::DVector;

#[test]
fn filters_are_unbiased_for_the_prior_flow() {
    let model = FiniteModel::canonical_two_state();
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let f = DVector::from_vec(vec![0.0, 1.0]);
    let split = SplittingFilter::new(&model, grid.dt()).unwrap();
    let checkpoints = [50usize, 100, 200];
    let mut euler = [Welford::default(); 3];
    let mut exact = [Welford::default(); 3];
    for p in 0..20_000 {
        let mut rng = path_stream(31, StreamRole::Simulation, p);
        let (_, z) = simulate_path(&model, &grid, &mut rng);
        let w = wonham_trajectory(&model, &z, grid.dt()).unwrap();
        let s = split.trajectory(&model.prior, &z).unwrap();
        for (j, &k) in checkpoints.iter().enumerate() {
            euler[j].push(w[k].pi.dot(&f));
            exact[j].push(s[k].pi.dot(&f));
        }
    }
    for (j, &k) in checkpoints.iter().enumerate() {
        let rho = forward_marginal(&model, grid.time(k)).unwrap().dot(&f);
        assert!(euler[j].finish().z_score(rho).abs() <= 4.0);
        assert!(exact[j].finish().z_score(rho).abs() <= 4.0);
    }
}

#[test]
fn zakai_normalization_matches_wonham() {
    let model = FiniteModel::canonical_two_state();
    let grid = TimeGrid::new(1.0, 500).unwrap();
    let mut rng = path_stream(2, StreamRole::Simulation, 0);
    let (_, z) = simulate_path(&model, &grid, &mut rng);
    let w = wonham_trajectory(&model, &z, grid.dt()).unwrap();
    let zk = zakai_trajectory(&model, &z, grid.dt()).unwrap();
    for (a, b) in w.iter().zip(&zk) {
        assert!((&a.pi - b.normalized()).amax() < 0.1);
        assert_relative_eq!(b.unnormalized() / b.unnormalized().sum(), b.normalized(), epsilon = 1e-12);
    }
}

#[test]
fn conditional_variance_vanishes_on_point_masses() {
    let f = DVector::from_vec(vec![2.0, -1.0, 0.5]);
    for i in 0..3 {
        let mut pi = DVector::zeros(3);
        pi[i] = 1.0;
        assert_eq!(conditional_variance(&pi, &f).unwrap(), 0.0);
    }
    let pi = DVector::from_vec(vec![0.5, 0.5, 0.0]);
    assert_relative_eq!(conditional_variance(&pi, &f).unwrap(), 2.25, epsilon = 1e-15);
}

#[test]
fn scalar_riccati_sits_at_equilibrium() {
    let lg = LGModel::scalar_canonical();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    for s in solve_kalman_dre(&lg, &grid).unwrap() {
        assert_relative_eq!(s[(0, 0)], 1.0, epsilon = 1e-14);
    }
    let mut rng = path_stream(4, StreamRole::Simulation, 0);
    let (_, z) = simulate_lg_path(&lg, &grid, &mut rng);
    let traj = kalman_trajectory(&lg, &z, grid.dt()).unwrap();
    assert_eq!(traj.len(), 101);
    assert_eq!(traj[0].mean, lg.m0);
}
