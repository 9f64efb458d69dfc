//! Thermal equilibrium, the mean-field free energy and the convexity
//! certificate for the modulated log-Sobolev constant.
//!
//! All functionals use the cell-averaged potential `G = (g * μ)` averaged
//! over each cell. With that choice the discrete free energy is minimized
//! exactly by the fixed point `μ ∝ exp(-β (G + V))`, so the solver output, the
//! free energy and the stationary state of the mean-field scheme agree to
//! rounding rather than to quadrature error.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{self, ConvTables, Grid1D, GridDensity, GridField, DENSITY_FLOOR};
use crate::kernels::{ConfinementSpec, KernelSpec};

#[derive(Debug, Clone, Copy)]
pub struct EquilibriumOptions {
    pub tol: f64,
    /// Initial damping θ in (0, 1]; halved whenever the residual grows.
    pub damping: f64,
    pub max_iter: usize,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        Self { tol: 1e-10, damping: 0.5, max_iter: 10_000 }
    }
}

#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub mu_beta: GridDensity,
    pub c_beta: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Confinement evaluated at the cell centers.
pub fn confinement_on_grid(conf: &ConfinementSpec, grid: &Grid1D) -> Vec<f64> {
    grid.centers().into_iter().map(|x| conf.value_1d(x)).collect()
}

/// `normalize(exp(-β (G + V)))` for the current density.
fn gibbs_map(potential: &[f64], beta: f64, grid: &Grid1D) -> Result<Vec<f64>> {
    let exponents: Vec<f64> = potential.iter().map(|u| -beta * u).collect();
    if exponents.iter().any(|e| e.is_nan() || *e == f64::INFINITY) {
        return Err(Error::Overflow("β (g * μ + V) is not finite on the grid".into()));
    }
    let top = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = exponents.iter().map(|e| (e - top).exp()).collect();
    let mass = grid.h() * out.iter().sum::<f64>();
    out.iter_mut().for_each(|v| *v /= mass);
    Ok(out)
}

/// Sup over the support of `|G + V + (1/β) log μ - c|` and the mass-weighted `c`.
fn residual_and_constant(mu: &[f64], potential: &[f64], beta: f64, h: f64) -> (f64, f64) {
    let field = |k: usize| potential[k] + mu[k].ln() / beta;
    let mut c = 0.0;
    let mut mass = 0.0;
    for (k, &m) in mu.iter().enumerate() {
        if m > DENSITY_FLOOR {
            c += h * m * field(k);
            mass += h * m;
        }
    }
    c /= mass;
    let residual = (0..mu.len())
        .filter(|&k| mu[k] > DENSITY_FLOOR)
        .map(|k| (field(k) - c).abs())
        .fold(0.0, f64::max);
    (residual, c)
}

/// Damped fixed point for `g * μ + V + (1/β) log μ = c_β`.
pub fn solve_thermal_equilibrium(
    kernel: &KernelSpec,
    conf: &ConfinementSpec,
    beta: f64,
    grid: &Grid1D,
    opts: &EquilibriumOptions,
) -> Result<EquilibriumResult> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidInput(format!("β must be positive and finite, got {beta}")));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidInput(format!("damping must lie in (0, 1], got {}", opts.damping)));
    }
    let tables = ConvTables::new(kernel, grid)?;
    let v = confinement_on_grid(conf, grid);
    let h = grid.h();
    let potential_of = |mu: &[f64]| -> Vec<f64> {
        tables.cell_conv(mu).iter().zip(&v).map(|(a, b)| a + b).collect()
    };

    let mut mu = gibbs_map(&v, beta, grid)?;
    let mut theta = opts.damping;
    let mut potential = potential_of(&mu);
    let (mut residual, mut c_beta) = residual_and_constant(&mu, &potential, beta, h);
    let mut iterations = 0;
    while residual >= opts.tol {
        if iterations == opts.max_iter {
            return Err(Error::NoConvergence { iterations, residual });
        }
        let target = gibbs_map(&potential, beta, grid)?;
        let candidate: Vec<f64> =
            mu.iter().zip(&target).map(|(a, b)| (1.0 - theta) * a + theta * b).collect();
        let cand_potential = potential_of(&candidate);
        let (cand_residual, cand_c) = residual_and_constant(&candidate, &cand_potential, beta, h);
        iterations += 1;
        if cand_residual > residual && theta > 1e-3 {
            theta *= 0.5;
            continue;
        }
        mu = candidate;
        potential = cand_potential;
        residual = cand_residual;
        c_beta = cand_c;
    }
    Ok(EquilibriumResult {
        mu_beta: GridDensity::from_unnormalized(*grid, mu)?,
        c_beta,
        residual,
        iterations,
    })
}

/// One damped fixed-point update, exposed for consistency checks.
pub fn equilibrium_iteration(
    mu: &GridDensity,
    kernel: &KernelSpec,
    conf: &ConfinementSpec,
    beta: f64,
    damping: f64,
) -> Result<GridDensity> {
    let grid = mu.grid();
    let tables = ConvTables::new(kernel, grid)?;
    let v = confinement_on_grid(conf, grid);
    let potential: Vec<f64> =
        tables.cell_conv(mu.values()).iter().zip(&v).map(|(a, b)| a + b).collect();
    let target = gibbs_map(&potential, beta, grid)?;
    let next = mu.values().iter().zip(&target).map(|(a, b)| (1.0 - damping) * a + damping * b).collect();
    GridDensity::from_unnormalized(*grid, next)
}

/// `½ ∬ g dμ dμ + ∫ V dμ + (1/β) ∫ μ log μ`; `β = ∞` drops the entropy.
pub fn free_energy(mu: &GridDensity, kernel: &KernelSpec, conf: &ConfinementSpec, beta: f64) -> Result<f64> {
    let tables = ConvTables::new(kernel, mu.grid())?;
    Ok(free_energy_with(&tables, mu, conf, beta))
}

pub(crate) fn free_energy_with(tables: &ConvTables, mu: &GridDensity, conf: &ConfinementSpec, beta: f64) -> f64 {
    let grid = mu.grid();
    let h = grid.h();
    let interaction = 0.5 * tables.double_integral(mu.values(), mu.values());
    let confinement: f64 =
        mu.values().iter().enumerate().map(|(k, m)| h * m * conf.value_1d(grid.center(k))).sum();
    let entropy = if beta.is_infinite() { 0.0 } else { grid::entropy(mu) / beta };
    interaction + confinement + entropy
}

/// `V_{μ,β} = -g * μ - (1/β) log μ` on the cell centers.
pub fn effective_confinement(mu: &GridDensity, kernel: &KernelSpec, beta: f64) -> Result<GridField> {
    let (first, last) = mu.support().ok_or_else(|| Error::Support("density has no support".into()))?;
    if let Some(k) = (first..=last).find(|&k| mu.values()[k] <= DENSITY_FLOOR) {
        return Err(Error::Support(format!("density vanishes in interior cell {k}")));
    }
    let tables = ConvTables::new(kernel, mu.grid())?;
    let conv = tables.cell_conv(mu.values());
    let inv_beta = if beta.is_infinite() { 0.0 } else { 1.0 / beta };
    let values = conv
        .iter()
        .zip(mu.values())
        .map(|(g, &m)| -g - inv_beta * m.max(DENSITY_FLOOR).ln())
        .collect();
    GridField::new(*mu.grid(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LsiEstimate {
    pub kappa: f64,
    /// `2 / (β κ)` when `κ > 0`, infinite otherwise.
    pub c_ls: f64,
    pub valid: bool,
    /// `inf V''` over the grid window.
    pub inf_v2: f64,
    /// `(1/β) ‖log(μ / μ_β)‖_{Ċ²}` over the common support window.
    pub entropy_term: f64,
    /// `‖g * (μ - μ_β)‖_{Ċ²}` over the common support window.
    pub interaction_term: f64,
    pub window: (usize, usize),
}

impl LsiEstimate {
    pub fn from_kappa(kappa: f64, beta: f64) -> Self {
        let valid = kappa > 0.0;
        Self {
            kappa,
            c_ls: if valid { 2.0 / (beta * kappa) } else { f64::INFINITY },
            valid,
            inf_v2: kappa,
            entropy_term: 0.0,
            interaction_term: 0.0,
            window: (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LsiOptions {
    /// Cells where either density is below `window_floor · sup` are outside the window.
    pub window_floor: f64,
}

impl Default for LsiOptions {
    fn default() -> Self {
        Self { window_floor: 1e-8 }
    }
}

/// Common support window of two densities.
pub fn common_window(mu: &GridDensity, nu: &GridDensity, rel_floor: f64) -> Result<(usize, usize)> {
    if mu.grid() != nu.grid() {
        return Err(Error::Support("densities live on different grids".into()));
    }
    let fa = rel_floor * mu.sup_norm();
    let fb = rel_floor * nu.sup_norm();
    let inside = |k: usize| mu.values()[k] > fa.max(DENSITY_FLOOR) && nu.values()[k] > fb.max(DENSITY_FLOOR);
    let n = mu.values().len();
    let first = (0..n).find(|&k| inside(k));
    let last = (0..n).rev().find(|&k| inside(k));
    match (first, last) {
        (Some(a), Some(b)) if b >= a + 2 => {
            if let Some(k) = (a..=b).find(|&k| !inside(k)) {
                return Err(Error::Support(format!("common support has a gap at cell {k}")));
            }
            Ok((a, b))
        }
        _ => Err(Error::Support("densities share fewer than three cells of support".into())),
    }
}

/// Lower bound `κ` on the convexity of `V_{μ,β}`-type confinements and the resulting LSI constant.
pub fn convexity_constant(
    mu: &GridDensity,
    mu_beta: &GridDensity,
    conf: &ConfinementSpec,
    kernel: &KernelSpec,
    beta: f64,
    opts: &LsiOptions,
) -> Result<LsiEstimate> {
    let tables = ConvTables::new(kernel, mu.grid())?;
    convexity_constant_with(&tables, mu, mu_beta, conf, beta, opts)
}

pub(crate) fn convexity_constant_with(
    tables: &ConvTables,
    mu: &GridDensity,
    mu_beta: &GridDensity,
    conf: &ConfinementSpec,
    beta: f64,
    opts: &LsiOptions,
) -> Result<LsiEstimate> {
    let grid = mu.grid();
    let (first, last) = common_window(mu, mu_beta, opts.window_floor)?;
    let h = grid.h();
    let inf_v2 = grid.centers().iter().map(|&x| conf.second_1d(x)).fold(f64::INFINITY, f64::min);
    let log_ratio: Vec<f64> = mu
        .values()
        .iter()
        .zip(mu_beta.values())
        .map(|(&a, &b)| if a > 0.0 && b > 0.0 { (a / b).ln() } else { 0.0 })
        .collect();
    let diff: Vec<f64> = mu.values().iter().zip(mu_beta.values()).map(|(a, b)| a - b).collect();
    let conv_diff = tables.cell_conv(&diff);
    let entropy_term = grid::c2_seminorm_window(&log_ratio, h, first, last) / beta;
    let interaction_term = grid::c2_seminorm_window(&conv_diff, h, first, last);
    let kappa = inf_v2 - (entropy_term + interaction_term);
    let mut est = LsiEstimate::from_kappa(kappa, beta);
    est.inf_v2 = inf_v2;
    est.entropy_term = entropy_term;
    est.interaction_term = interaction_term;
    est.window = (first, last);
    Ok(est)
}

/// `e^{h} μ_β / ∫ e^{h} dμ_β` for a perturbation `h` given at the cell centers.
pub fn tilt(mu_beta: &GridDensity, h: impl Fn(f64) -> f64) -> Result<GridDensity> {
    let grid = mu_beta.grid();
    let values = mu_beta
        .values()
        .iter()
        .enumerate()
        .map(|(k, &m)| m * h(grid.center(k)).exp())
        .collect();
    GridDensity::from_unnormalized(*grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::SmoothKernel;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(beta: f64) -> (KernelSpec, ConfinementSpec, Grid1D, EquilibriumResult) {
        let kernel = KernelSpec::log(1).unwrap();
        let conf = ConfinementSpec::quadratic(2.0, 1).unwrap();
        let grid = Grid1D::new(-4.0, 4.0, 256).unwrap();
        let eq = solve_thermal_equilibrium(&kernel, &conf, beta, &grid, &EquilibriumOptions::default()).unwrap();
        (kernel, conf, grid, eq)
    }

    fn smooth_perturbation(rng: &mut ChaCha8Rng, mu: &GridDensity, amplitude: f64) -> GridDensity {
        let grid = mu.grid();
        let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let bump = |x: f64| {
            let s: f64 = (0..3)
                .map(|j| a[j] * ((j + 1) as f64 * x).sin() + b[j] * ((j + 1) as f64 * x).cos())
                .sum();
            (s / 3.0).clamp(-1.0, 1.0)
        };
        let values =
            mu.values().iter().enumerate().map(|(k, &m)| m * (1.0 + amplitude * bump(grid.center(k)))).collect();
        GridDensity::from_unnormalized(*grid, values).unwrap()
    }

    #[test]
    fn zero_kernel_gives_gibbs_density() {
        let zero = KernelSpec::zero(1).unwrap();
        let conf = ConfinementSpec::quartic(0.25, -0.5, 1).unwrap();
        let grid = Grid1D::new(-3.0, 3.0, 64).unwrap();
        let eq = solve_thermal_equilibrium(&zero, &conf, 2.0, &grid, &EquilibriumOptions::default()).unwrap();
        let expected =
            GridDensity::from_unnormalized(grid, grid.centers().iter().map(|&x| (-2.0 * conf.value_1d(x)).exp()).collect())
                .unwrap();
        assert!(eq.mu_beta.sup_distance(&expected) < 1e-13);
    }

    #[test]
    fn log_gas_equilibrium_is_a_minimizer() {
        let (kernel, conf, _, eq) = setup(1.0);
        assert!(eq.residual < 1e-8);
        let f0 = free_energy(&eq.mu_beta, &kernel, &conf, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pert = smooth_perturbation(&mut rng, &eq.mu_beta, 0.05);
            assert!(free_energy(&pert, &kernel, &conf, 1.0).unwrap() >= f0 - 1e-8);
        }
    }

    #[test]
    fn several_temperatures_converge() {
        for beta in [0.5, 1.0, 2.0] {
            let (_, _, _, eq) = setup(beta);
            assert!(eq.residual < 1e-8, "β = {beta}: residual {}", eq.residual);
        }
    }

    #[test]
    fn one_more_iteration_is_a_no_op() {
        let (kernel, conf, _, eq) = setup(1.0);
        let next = equilibrium_iteration(&eq.mu_beta, &kernel, &conf, 1.0, 0.5).unwrap();
        assert!(next.sup_distance(&eq.mu_beta) < EquilibriumOptions::default().tol);
    }

    #[test]
    fn refinement_changes_constant_little() {
        let kernel = KernelSpec::log(1).unwrap();
        let conf = ConfinementSpec::quadratic(2.0, 1).unwrap();
        let coarse = Grid1D::new(-4.0, 4.0, 128).unwrap();
        let opts = EquilibriumOptions::default();
        let a = solve_thermal_equilibrium(&kernel, &conf, 1.0, &coarse, &opts).unwrap();
        let b = solve_thermal_equilibrium(&kernel, &conf, 1.0, &coarse.refined(), &opts).unwrap();
        assert!((a.c_beta - b.c_beta).abs() < 1e-3, "{} vs {}", a.c_beta, b.c_beta);
    }

    #[test]
    fn free_energy_examples() {
        let grid = Grid1D::new(0.0, 1.0, 64).unwrap();
        let uniform = GridDensity::uniform(grid, 0.0, 1.0).unwrap();
        let flat = ConfinementSpec::quartic(0.0, 0.0, 1).unwrap();
        let zero = KernelSpec::zero(1).unwrap();
        assert_abs_diff_eq!(free_energy(&uniform, &zero, &flat, 1.0).unwrap(), 0.0, epsilon = 1e-14);
        let log = KernelSpec::log(1).unwrap();
        assert_abs_diff_eq!(free_energy(&uniform, &log, &flat, f64::INFINITY).unwrap(), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn equilibrium_beats_random_densities() {
        let (kernel, conf, grid, eq) = setup(1.0);
        let f0 = free_energy(&eq.mu_beta, &kernel, &conf, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let m = rng.random_range(-1.0..1.0);
            let v = rng.random_range(0.05..1.5);
            let mu = GridDensity::gaussian(grid, m, v).unwrap();
            assert!(free_energy(&mu, &kernel, &conf, 1.0).unwrap() >= f0);
        }
    }

    #[test]
    fn effective_confinement_at_equilibrium() {
        let (kernel, conf, grid, eq) = setup(1.0);
        let field = effective_confinement(&eq.mu_beta, &kernel, 1.0).unwrap();
        for (k, v) in field.values().iter().enumerate() {
            if eq.mu_beta.values()[k] > DENSITY_FLOOR {
                assert!((v - (conf.value_1d(grid.center(k)) - eq.c_beta)).abs() <= 2.0 * eq.residual + 1e-12);
            }
        }
        // zero kernel: V_{μ,β} = V + const for the Gibbs density
        let zero = KernelSpec::zero(1).unwrap();
        let g = Grid1D::new(-3.0, 3.0, 64).unwrap();
        let mu = GridDensity::from_unnormalized(g, g.centers().iter().map(|x| (-x * x).exp()).collect()).unwrap();
        let field = effective_confinement(&mu, &zero, 1.0).unwrap();
        let offset = field.values()[0] - g.center(0).powi(2);
        for (k, v) in field.values().iter().enumerate() {
            assert_abs_diff_eq!(*v, g.center(k).powi(2) + offset, epsilon = 1e-10);
        }
        // large β leaves only the interaction
        let hot = effective_confinement(&eq.mu_beta, &kernel, 1e12).unwrap();
        let conv = grid::convolve_kernel_cells(&kernel, &eq.mu_beta).unwrap();
        for k in 100..156 {
            assert_abs_diff_eq!(hot.values()[k], -conv.values()[k], epsilon = 1e-9);
        }
    }

    #[test]
    fn effective_confinement_rejects_interior_zeros() {
        let g = Grid1D::new(0.0, 1.0, 32).unwrap();
        let mut vals = vec![1.0; 32];
        vals[10] = 0.0;
        let mu = GridDensity::from_unnormalized(g, vals).unwrap();
        assert!(matches!(effective_confinement(&mu, &KernelSpec::log(1).unwrap(), 1.0), Err(Error::Support(_))));
    }

    #[test]
    fn convexity_at_equilibrium() {
        for beta in [0.5, 1.0] {
            let (kernel, conf, _, eq) = setup(beta);
            let est = convexity_constant(&eq.mu_beta, &eq.mu_beta, &conf, &kernel, beta, &LsiOptions::default()).unwrap();
            assert_eq!(est.kappa, 2.0);
            assert!(est.valid);
            assert_abs_diff_eq!(est.c_ls, 1.0 / beta, epsilon = 1e-15);
            assert_eq!(est.c_ls * beta * est.kappa, 2.0);
        }
    }

    #[test]
    fn kappa_decreases_along_tilt_family() {
        let (kernel, conf, _, eq) = setup(1.0);
        let mut last = f64::INFINITY;
        for (i, eps) in [0.0, 0.01, 0.05, 0.1, 0.2, 0.4].iter().enumerate() {
            let mu = tilt(&eq.mu_beta, |x| eps * (1.3 * x).cos()).unwrap();
            let est = convexity_constant(&mu, &eq.mu_beta, &conf, &kernel, 1.0, &LsiOptions::default()).unwrap();
            assert!(est.kappa <= last + 1e-12, "step {i}: {} after {last}", est.kappa);
            if i == 1 {
                assert!((est.kappa - 2.0).abs() < 0.05);
            }
            assert_abs_diff_eq!(est.kappa, est.inf_v2 - est.entropy_term - est.interaction_term, epsilon = 1e-15);
            last = est.kappa;
        }
        assert!(last < 2.0);
    }

    #[test]
    fn entropy_term_scales_with_temperature() {
        let (kernel, conf, _, eq) = setup(1.0);
        let mu = tilt(&eq.mu_beta, |x| 0.1 * x.cos()).unwrap();
        let a = convexity_constant(&mu, &eq.mu_beta, &conf, &kernel, 1.0, &LsiOptions::default()).unwrap();
        let b = convexity_constant(&mu, &eq.mu_beta, &conf, &kernel, 4.0, &LsiOptions::default()).unwrap();
        assert_abs_diff_eq!(a.entropy_term, 4.0 * b.entropy_term, epsilon = 1e-12);
        assert_eq!(a.interaction_term, b.interaction_term);
        // the tilt has ‖h''‖ ≈ 0.1 near the origin
        assert!((a.entropy_term - 0.1).abs() < 1e-3);
    }

    #[test]
    fn invalid_certificate_is_reported() {
        let grid = Grid1D::new(-4.0, 4.0, 128).unwrap();
        let kernel = KernelSpec::smooth(SmoothKernel::Gaussian, 1).unwrap();
        let conf = ConfinementSpec::quadratic(0.5, 1).unwrap();
        let eq = solve_thermal_equilibrium(&kernel, &conf, 1.0, &grid, &EquilibriumOptions::default()).unwrap();
        let mu = tilt(&eq.mu_beta, |x| 2.0 * (3.0 * x).cos()).unwrap();
        let est = convexity_constant(&mu, &eq.mu_beta, &conf, &kernel, 1.0, &LsiOptions::default()).unwrap();
        assert!(!est.valid);
        assert!(est.kappa < 0.0);
        assert!(est.c_ls.is_infinite());
    }

    #[test]
    fn rejects_bad_temperature() {
        let kernel = KernelSpec::log(1).unwrap();
        let conf = ConfinementSpec::quadratic(2.0, 1).unwrap();
        let grid = Grid1D::new(-4.0, 4.0, 64).unwrap();
        assert!(solve_thermal_equilibrium(&kernel, &conf, 0.0, &grid, &EquilibriumOptions::default()).is_err());
    }
}
