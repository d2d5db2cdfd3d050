use pstrat_core::estimands::{estimand_draws, Estimand};
use pstrat_core::gibbs::{run_chains, ChainConfig};
use pstrat_core::oracle::{benchmark_case, grid_posterior, GridSpec, BENCHMARK_GRID};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn grid_is_normalised_and_stable_on_a_finer_mesh() {
    let (data, spec) = benchmark_case(11).unwrap();
    let coarse = GridSpec::prior_covering(&data, &spec, 16, 0.2).unwrap();
    let fine = GridSpec::prior_covering(&data, &spec, BENCHMARK_GRID.0, BENCHMARK_GRID.1).unwrap();
    let coarse = grid_posterior(&data, &spec, &coarse).unwrap();
    let fine = grid_posterior(&data, &spec, &fine).unwrap();
    for post in [&coarse, &fine] {
        assert!((post.total_mass() - 1.0).abs() < 1e-10);
    }
    assert!((coarse.mean_pi_c - fine.mean_pi_c).abs() < 0.025);
    assert!((coarse.mean_tau_c - fine.mean_tau_c).abs() < 0.025);
    assert!((coarse.mean_tau_n - fine.mean_tau_n).abs() < 0.025);
}

#[test]
fn gibbs_agrees_with_the_grid_on_other_seeds() {
    for seed in [12u64, 13] {
        let (data, spec) = benchmark_case(seed).unwrap();
        let grid = GridSpec::prior_covering(&data, &spec, BENCHMARK_GRID.0, BENCHMARK_GRID.1).unwrap();
        let post = grid_posterior(&data, &spec, &grid).unwrap();
        let cfg = ChainConfig { n_iter: 12_000, n_burnin: 2_000, seed, ..Default::default() };
        let store = run_chains(&data, &spec, &cfg).unwrap();
        let pi = mean(&estimand_draws(&store, Estimand::PiC).unwrap());
        let tc = mean(&estimand_draws(&store, Estimand::TauC).unwrap());
        assert!((pi - post.mean_pi_c).abs() < 0.05, "seed {seed}: {pi} vs {}", post.mean_pi_c);
        assert!((tc - post.mean_tau_c).abs() < 0.05, "seed {seed}: {tc} vs {}", post.mean_tau_c);
    }
}
