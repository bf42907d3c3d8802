//! The polymer measure reached two ways: sampling the kernel chain, and
//! reweighting paths of the partial Girsanov SDE.

use std::f64::consts::PI;

use parakpz::enhanced_noise::{build_trees, mollify, renorm_constants, sample_noise, stationary_initial, EnhancedData, RenormMode};
use parakpz::kpz_pipeline::{solve_kpz, KpzOptions, KpzSolution};
use parakpz::linear_solver::{solve_yr, SolverOptions};
use parakpz::polymer_sampler::{
    free_energy_check, girsanov_sde_sample, mean_and_error, reweight, sample_polymer, transition_kernel, RadonNikodym,
};
use parakpz::spectral_core::{make_dyadic_partition, Grid, GridField};

fn setup(seed: u64) -> (EnhancedData, KpzSolution, GridField, SolverOptions) {
    let g = Grid::new(2.0 * PI, 64).unwrap();
    let part = make_dyadic_partition(&g, 1.0).unwrap();
    let dt = 1.0 / 128.0;
    let xi = sample_noise(&g, 1.0, dt, seed).unwrap();
    let init = stationary_initial(&g, dt, 0.0, seed);
    let c = renorm_constants(&g, xi.mesh(), Some(4.0), &init.variance, RenormMode::TimeDependent).unwrap();
    let data = build_trees(&mollify(&xi, 4.0).unwrap(), &init, &c, &part).unwrap();
    let opts = SolverOptions::default().direct();
    let hbar = GridField::from_fn(g, |x| 0.5 * x.cos());
    let sol = solve_kpz(&data, &hbar, &KpzOptions { solver: opts, ..KpzOptions::default() }).unwrap();
    (data, sol, hbar, opts)
}

#[test]
fn kernel_chain_and_reweighted_sde_agree_on_marginals() {
    let (data, sol, _, opts) = setup(61);
    let (_, yr, _) = solve_yr(&data, &opts).unwrap();
    let x0 = 0.2;
    let chain: Vec<_> = (0..2).map(|i| transition_kernel(&data, &sol.h, 0.5 * i as f64, 0.5 * (i + 1) as f64, &opts).unwrap()).collect();
    let paths = sample_polymer(&chain, x0, 20_000, 7).unwrap();

    let dt = 1.0 / 512.0;
    let sde = girsanov_sde_sample(&data, x0, dt, 20_000, 8).unwrap();
    let rn = RadonNikodym::new(&data, &sol.h, &yr).unwrap();
    let w = reweight(&sde, &rn);
    assert_eq!(w.excluded, 0);
    let total: f64 = w.weights.iter().sum();

    for (k, t) in [(1usize, 0.5), (2, 1.0)] {
        let idx = sde.times.iter().position(|s| (s - t).abs() < 1e-9).unwrap();
        for (name, g) in [("cos", f64::cos as fn(f64) -> f64), ("sin", f64::sin)] {
            let direct: Vec<f64> = paths.iter().map(|p| g(p.positions[k])).collect();
            let (m1, se1) = mean_and_error(&direct);
            let vals: Vec<f64> = sde.paths.iter().map(|p| g(p[idx])).collect();
            let m2 = w.weights.iter().zip(&vals).map(|(a, b)| a * b).sum::<f64>() / total;
            let se2 = w.weights.iter().zip(&vals).map(|(a, b)| (a * (b - m2)).powi(2)).sum::<f64>().sqrt() / total;
            let z = (m1 - m2).abs() / (se1 * se1 + se2 * se2).sqrt();
            assert!(z < 3.0, "{name}(γ_{t}): chain {m1:.4} ± {se1:.4}, sde {m2:.4} ± {se2:.4}");
        }
    }
}

#[test]
fn free_energy_identity_holds_within_monte_carlo_error() {
    let (data, sol, hbar, opts) = setup(62);
    let (_, yr, _) = solve_yr(&data, &opts).unwrap();
    let r = free_energy_check(&data, &sol.h, &yr, &hbar, 0.0, 1.0 / 512.0, 20_000, 9).unwrap();
    assert_eq!(r.excluded, 0);
    assert!(r.gap < 3.0 * r.mc_error, "lhs {:.5}, Monte Carlo {:.5} ± {:.5}", r.lhs, r.mc, r.mc_error);
}
