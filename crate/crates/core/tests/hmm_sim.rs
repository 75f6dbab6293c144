use approx::assert_relative_eq;
use dualfilt::filters::SplittingFilter;
use dualfilt::hmm::{forward_marginal, marginals_on_grid, simulate_path, simulate_state_path};
use dualfilt::rng::{path_stream, StreamRole};
use dualfilt::stats::Welford;
use dualfilt::{FiniteModel, TimeGrid};
use nalgebra::{DMatrix, DVector};

fn three_state() -> FiniteModel {
    let a = DMatrix::from_row_slice(3, 3, &[-1.5, 1.0, 0.5, 0.3, -0.8, 0.5, 2.0, 0.0, -2.0]);
    let h = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 1.0, -0.5, 2.0, 0.0]);
    FiniteModel::new(a, h, DVector::from_vec(vec![0.2, 0.5, 0.3])).unwrap()
}

#[test]
fn terminal_frequencies_match_marginal() {
    let model = three_state();
    let grid = TimeGrid::new(1.3, 13).unwrap();
    let n = 1_000_000u64;
    let mut counts = [0u64; 3];
    for p in 0..n {
        let mut rng = path_stream(5, StreamRole::Simulation, p);
        counts[simulate_state_path(&model, &grid, &mut rng).terminal_state()] += 1;
    }
    let rho = forward_marginal(&model, 1.3).unwrap();
    for i in 0..3 {
        let freq = counts[i] as f64 / n as f64;
        let se = (rho[i] * (1.0 - rho[i]) / n as f64).sqrt();
        assert!((freq - rho[i]).abs() <= 4.0 * se, "state {i}: {freq} vs {}", rho[i]);
    }
}

#[test]
fn marginals_form_a_semigroup() {
    let model = three_state();
    let (s, t) = (0.37, 0.91);
    let mid = forward_marginal(&model, s).unwrap();
    let composed = forward_marginal(&model.with_prior(mid).unwrap(), t).unwrap();
    let direct = forward_marginal(&model, s + t).unwrap();
    assert_relative_eq!(composed, direct, epsilon = 1e-12);
    assert_relative_eq!(direct.sum(), 1.0, epsilon = 1e-12);
}

#[test]
fn paths_are_reproducible_per_stream() {
    let model = three_state();
    let grid = TimeGrid::new(1.0, 50).unwrap();
    let draw = |p| {
        let mut rng = path_stream(9, StreamRole::Simulation, p);
        simulate_path(&model, &grid, &mut rng)
    };
    let (x1, z1) = draw(17);
    let (x2, z2) = draw(17);
    assert_eq!(x1, x2);
    assert_eq!(z1, z2);
    assert_ne!(draw(18).1, z1);
}

#[test]
fn mean_observation_is_left_point_quadrature() {
    let model = three_state();
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let rhos = marginals_on_grid(&model, &grid).unwrap();
    let mut expected = DVector::zeros(2);
    for rho in &rhos[..grid.steps()] {
        expected += model.obs.transpose() * rho * grid.dt();
    }
    let mut acc = [Welford::default(), Welford::default()];
    for p in 0..100_000 {
        let mut rng = path_stream(21, StreamRole::Simulation, p);
        let (_, z) = simulate_path(&model, &grid, &mut rng);
        for (c, w) in acc.iter_mut().enumerate() {
            w.push(z.cumulative[(grid.steps(), c)]);
        }
    }
    for (c, w) in acc.iter().enumerate() {
        let s = w.finish();
        assert!(s.z_score(expected[c]).abs() <= 4.0, "channel {c}: {s:?} vs {}", expected[c]);
    }
}

#[test]
fn blind_filter_follows_the_prior_flow() {
    let base = three_state();
    let model = FiniteModel::new(base.rate.clone(), DMatrix::zeros(3, 2), base.prior.clone()).unwrap();
    let grid = TimeGrid::new(1.0, 40).unwrap();
    let filter = SplittingFilter::new(&model, grid.dt()).unwrap();
    let rhos = marginals_on_grid(&model, &grid).unwrap();
    let mut rng = path_stream(3, StreamRole::Simulation, 0);
    let (_, z) = simulate_path(&model, &grid, &mut rng);
    let states = filter.trajectory(&model.prior, &z).unwrap();
    for (s, rho) in states.iter().zip(&rhos) {
        assert_relative_eq!(s.pi, *rho, epsilon = 1e-12);
    }
}
