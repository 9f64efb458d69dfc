//! Cross-module checks: each test chains two or more modules and compares
//! against an independent closed form or an identity between them.

use chaoslab::diagnostics::{jensen_lower_bound, log_partition_estimate, pooled_marginal, w2_to_density};
use chaoslab::equilibrium::{solve_thermal_equilibrium, EquilibriumOptions};
use chaoslab::grid::{Grid1D, GridDensity};
use chaoslab::kernels::{ConfinementSpec, KernelSpec};
use chaoslab::liouville::{build_joint, modulated_gibbs, JointInit, LiouvilleSolver};
use chaoslab::meanfield::{MeanFieldSolver, StepMode};
use chaoslab::particles::{replica_rng, run_ensemble, DensitySampler, Dynamics, ParticleConfig, SdeParams};

fn log() -> KernelSpec {
    KernelSpec::log(1).unwrap()
}

#[test]
fn equilibrium_is_a_fixed_point_of_the_mean_field_flow() {
    let grid = Grid1D::new(-6.0, 6.0, 256).unwrap();
    let conf = ConfinementSpec::quadratic(2.0, 1).unwrap();
    let eq = solve_thermal_equilibrium(&log(), &conf, 1.0, &grid, &EquilibriumOptions::default()).unwrap();
    let solver = MeanFieldSolver::new(&log(), &conf, 1.0, &grid, StepMode::SemiImplicit).unwrap();
    let run = solver.run(eq.mu_beta.clone(), 0.01, 0.5, 0.5, Some(&eq.mu_beta)).unwrap();
    let last = &run.snapshots.last().unwrap().mu;
    assert!(last.l1_distance(&eq.mu_beta) < 1e-6, "drift {}", last.l1_distance(&eq.mu_beta));
    let f0 = run.records[0].free_energy;
    for r in &run.records {
        assert!((r.free_energy - f0).abs() < 1e-8 * (1.0 + f0.abs()));
    }
}

#[test]
fn mean_field_flow_relaxes_to_the_equilibrium() {
    let grid = Grid1D::new(-6.0, 6.0, 256).unwrap();
    let conf = ConfinementSpec::quadratic(2.0, 1).unwrap();
    let eq = solve_thermal_equilibrium(&log(), &conf, 1.0, &grid, &EquilibriumOptions::default()).unwrap();
    let solver = MeanFieldSolver::new(&log(), &conf, 1.0, &grid, StepMode::SemiImplicit).unwrap();
    let mu0 = GridDensity::gaussian(grid, 1.0, 0.2).unwrap();
    let run = solver.run(mu0, 0.005, 6.0, 1.0, Some(&eq.mu_beta)).unwrap();
    let d: Vec<f64> = run.records.iter().map(|r| r.l1_dist_to_equilibrium).collect();
    assert!(d.last().unwrap() < &1e-4, "{d:?}");
    assert!(d.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{d:?}");
}

#[test]
fn gibbs_measure_is_the_modulated_gibbs_measure_of_the_equilibrium() {
    let grid = Grid1D::new(-5.0, 5.0, 96).unwrap();
    let conf = ConfinementSpec::quadratic(2.0, 1).unwrap();
    let beta = 1.5;
    let opts = EquilibriumOptions { tol: 1e-12, ..Default::default() };
    let eq = solve_thermal_equilibrium(&log(), &conf, beta, &grid, &opts).unwrap();
    let p = build_joint(JointInit::Gibbs(&conf, grid), &log(), beta, 2).unwrap();
    let q = modulated_gibbs(&eq.mu_beta, &log(), beta, 2).unwrap().q;
    assert!(p.sup_distance(&q) < 1e-6 * p.sup_norm(), "{}", p.sup_distance(&q) / p.sup_norm());
    // the tensor solver's stationary state agrees too
    let solver = LiouvilleSolver::new(&log(), &conf, beta, &grid, 2, StepMode::SemiImplicit).unwrap();
    let g = solver.gibbs().unwrap();
    assert!(g.sup_distance(&p) < 1e-10 * p.sup_norm());
}

#[test]
fn importance_sampling_matches_the_tensor_partition_function() {
    let grid = Grid1D::new(-6.0, 6.0, 256).unwrap();
    let mu = GridDensity::gaussian(grid, 0.0, 0.6).unwrap();
    let beta = 1.0;
    let exact = modulated_gibbs(&mu, &log(), beta, 2).unwrap().log_k;
    let mut rng = replica_rng(5, 0);
    let est = log_partition_estimate(&mu, &log(), beta, 2, 100_000, &mut rng).unwrap();
    assert!((est.estimate - exact).abs() < 3.0 * est.std_error, "{} vs {exact} ± {}", est.estimate, est.std_error);
    assert!(exact >= jensen_lower_bound(&mu, &log(), beta).unwrap() - 1e-9);
}

#[test]
fn sde_ensemble_without_interaction_follows_the_ornstein_uhlenbeck_law() {
    // dX = -κ X dt + sqrt(2/β) dW: Gaussian with mean m e^{-κt}, variance
    // v e^{-2κt} + (1 - e^{-2κt}) / (βκ)
    let (kappa, beta, t) = (2.0, 1.0, 0.5);
    let grid = Grid1D::new(-6.0, 6.0, 1024).unwrap();
    let mu0 = GridDensity::gaussian(grid, 0.5, 0.3).unwrap();
    let conf = ConfinementSpec::quadratic(kappa, 1).unwrap();
    let zero = KernelSpec::zero(1).unwrap();
    let sampler = DensitySampler::new(&mu0);
    let init = |rng: &mut _| ParticleConfig::line((0..16).map(|_| sampler.sample(rng)).collect());
    let dynamics = Dynamics::Sde(SdeParams { beta, dt: 1e-3, max_halvings: 0, drift_cap: f64::INFINITY });
    let (snaps, _) = run_ensemble(init, &dynamics, &zero, &conf, 256, 3, t, t).unwrap();
    let pooled = pooled_marginal(&snaps[snaps.len() - 1..], 1).unwrap();
    let decay = (-kappa * t).exp();
    let exact = GridDensity::gaussian(grid, 0.5 * decay, 0.3 * decay * decay + (1.0 - decay * decay) / (beta * kappa)).unwrap();
    let w2 = w2_to_density(&pooled, &exact);
    assert!(w2 < 0.03, "w2 = {w2}");
    // and the mean-field solver reproduces the same law
    let solver = MeanFieldSolver::new(&zero, &conf, beta, &grid, StepMode::SemiImplicit).unwrap();
    let run = solver.run(mu0, 1e-3, t, t, None).unwrap();
    let mu_t = &run.snapshots.last().unwrap().mu;
    assert!(mu_t.l1_distance(&exact) < 5e-3, "{}", mu_t.l1_distance(&exact));
}
