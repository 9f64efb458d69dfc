//! Finite-volume solver for the one-dimensional McKean–Vlasov equation
//!
//! ```text
//! ∂_t μ = ∂_x(μ ∂_x(g * μ + V)) + (1/β) ∂_xx μ
//! ```
//!
//! with Scharfetter–Gummel (exponentially fitted, Chang–Cooper type) fluxes and
//! no-flux boundaries. The potential is frozen over a step and refreshed every
//! step.

use serde::Serialize;

use crate::equilibrium;
use crate::error::{Error, Result};
use crate::grid::{self, ConvTables, Grid1D, GridDensity, GridField, DENSITY_FLOOR};
use crate::kernels::{ConfinementSpec, KernelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StepMode {
    /// Forward Euler; requires `dt ≤ β h² / 2`.
    Explicit,
    /// Backward Euler with the potential frozen at the old state.
    SemiImplicit,
}

/// Bernoulli function `z / (e^z - 1)`.
#[inline]
pub(crate) fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 - 0.5 * z
    } else {
        z / z.exp_m1()
    }
}

/// Face weights `(B(z_k), B(-z_k))` for a potential sampled along a line.
pub(crate) fn face_weights(potential: &[f64], beta: f64, fwd: &mut [f64], bwd: &mut [f64]) {
    for k in 0..potential.len() - 1 {
        let z = beta * (potential[k + 1] - potential[k]);
        fwd[k] = bernoulli(z);
        bwd[k] = bernoulli(-z);
    }
}

/// Solves `(I + r A) x = b` in place, where `A` is the no-flux
/// Scharfetter–Gummel operator with face weights `fwd`, `bwd` and `r = dt / (β h²)`.
pub(crate) fn implicit_line_solve(fwd: &[f64], bwd: &[f64], r: f64, b: &mut [f64], scratch: &mut [f64]) {
    let n = b.len();
    // Thomas algorithm; the matrix is a column-diagonally-dominant M-matrix,
    // so every pivot is positive and the solution stays nonnegative.
    let diag = |k: usize| {
        let mut d = 1.0;
        if k + 1 < n {
            d += r * fwd[k];
        }
        if k > 0 {
            d += r * bwd[k - 1];
        }
        d
    };
    let upper = |k: usize| -r * bwd[k];
    let lower = |k: usize| -r * fwd[k - 1];
    let mut denom = diag(0);
    scratch[0] = if n > 1 { upper(0) / denom } else { 0.0 };
    b[0] /= denom;
    for k in 1..n {
        let a = lower(k);
        denom = diag(k) - a * scratch[k - 1];
        scratch[k] = if k + 1 < n { upper(k) / denom } else { 0.0 };
        b[k] = (b[k] - a * b[k - 1]) / denom;
    }
    for k in (0..n - 1).rev() {
        b[k] -= scratch[k] * b[k + 1];
    }
}

/// Forward Euler update with the same fluxes.
pub(crate) fn explicit_line_update(fwd: &[f64], bwd: &[f64], r: f64, mu: &[f64], out: &mut [f64]) {
    let n = mu.len();
    let flux = |k: usize| fwd[k] * mu[k] - bwd[k] * mu[k + 1];
    for k in 0..n {
        let right = if k + 1 < n { flux(k) } else { 0.0 };
        let left = if k > 0 { flux(k - 1) } else { 0.0 };
        out[k] = mu[k] - r * (right - left);
    }
}

#[derive(Debug, Clone)]
pub struct MeanFieldState {
    pub t: f64,
    pub mu: GridDensity,
    /// `(1/β) ∂ log μ + ∂V + ∂(g * μ)` on cells above the floor, zero elsewhere.
    pub u: GridField,
    pub sup_norm: f64,
    pub sup_u: f64,
    pub grad_u_sup: f64,
    /// Cells left out of the velocity norms (below the floor or next to such a cell).
    pub excluded: usize,
    pub free_energy: f64,
    pub(crate) potential: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanFieldRecord {
    pub t: f64,
    pub free_energy: f64,
    pub dissipation_lhs: f64,
    pub dissipation_rhs: f64,
    pub sup_mu: f64,
    pub sup_u: f64,
    pub sup_grad_u: f64,
    pub l1_dist_to_equilibrium: f64,
}

impl MeanFieldRecord {
    pub const CSV_HEADER: &'static str =
        "t,free_energy,dissipation_lhs,dissipation_rhs,sup_mu,sup_u,sup_grad_u,l1_dist_to_equilibrium";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.t,
            self.free_energy,
            self.dissipation_lhs,
            self.dissipation_rhs,
            self.sup_mu,
            self.sup_u,
            self.sup_grad_u,
            self.l1_dist_to_equilibrium
        )
    }
}

#[derive(Debug, Clone)]
pub struct MeanFieldRun {
    pub snapshots: Vec<MeanFieldState>,
    pub records: Vec<MeanFieldRecord>,
}

/// Solver context: kernel tables and confinement on one grid.
#[derive(Debug, Clone)]
pub struct MeanFieldSolver {
    conf: ConfinementSpec,
    beta: f64,
    mode: StepMode,
    tables: ConvTables,
    v: Vec<f64>,
    zero_kernel: bool,
}

impl MeanFieldSolver {
    pub fn new(kernel: &KernelSpec, conf: &ConfinementSpec, beta: f64, grid: &Grid1D, mode: StepMode) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidInput(format!("β must be positive and finite, got {beta}")));
        }
        let tables = ConvTables::new(kernel, grid)?;
        Ok(Self {
            conf: conf.clone(),
            beta,
            mode,
            tables,
            v: equilibrium::confinement_on_grid(conf, grid),
            zero_kernel: kernel.is_zero(),
        })
    }

    pub fn grid(&self) -> &Grid1D {
        self.tables.grid()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn tables(&self) -> &ConvTables {
        &self.tables
    }

    pub fn confinement(&self) -> &ConfinementSpec {
        &self.conf
    }

    /// Explicit-mode stability bound `β h² / 2`.
    pub fn explicit_limit(&self) -> f64 {
        let h = self.grid().h();
        0.5 * self.beta * h * h
    }

    /// Default step: `0.25 β h²` explicit, `h` semi-implicit.
    pub fn default_dt(&self) -> f64 {
        let h = self.grid().h();
        match self.mode {
            StepMode::Explicit => 0.25 * self.beta * h * h,
            StepMode::SemiImplicit => h,
        }
    }

    fn conv(&self, mu: &[f64]) -> Vec<f64> {
        if self.zero_kernel {
            vec![0.0; mu.len()]
        } else {
            self.tables.cell_conv(mu)
        }
    }

    /// Builds the full state (velocity, norms, free energy) for a density.
    pub fn state(&self, t: f64, mu: GridDensity) -> MeanFieldState {
        let grid = *mu.grid();
        let h = grid.h();
        let m = mu.values();
        let n = m.len();
        let conv = self.conv(m);
        let potential: Vec<f64> = conv.iter().zip(&self.v).map(|(a, b)| a + b).collect();
        let inv_beta = 1.0 / self.beta;

        // u = ∂ψ with ψ = (1/β) log μ + G + V, central differences on cells
        // whose neighbours are both above the floor
        let alive = |k: usize| m[k] > DENSITY_FLOOR;
        let psi: Vec<f64> =
            (0..n).map(|k| inv_beta * m[k].max(DENSITY_FLOOR).ln() + potential[k]).collect();
        let mut u = vec![0.0; n];
        let mut valid = vec![false; n];
        for k in 1..n.saturating_sub(1) {
            if alive(k - 1) && alive(k) && alive(k + 1) {
                u[k] = (psi[k + 1] - psi[k - 1]) / (2.0 * h);
                valid[k] = true;
            }
        }
        let excluded = valid.iter().filter(|v| !**v).count();
        let sup_u = (0..n).filter(|&k| valid[k]).map(|k| u[k].abs()).fold(0.0, f64::max);
        let grad_u_sup = (1..n.saturating_sub(1))
            .filter(|&k| valid[k - 1] && valid[k] && valid[k + 1])
            .map(|k| ((u[k + 1] - u[k - 1]) / (2.0 * h)).abs())
            .fold(0.0, f64::max);
        let interaction = 0.5 * h * m.iter().zip(&conv).map(|(a, b)| a * b).sum::<f64>();
        let confinement = h * m.iter().zip(&self.v).map(|(a, b)| a * b).sum::<f64>();
        let free_energy = interaction + confinement + grid::entropy(&mu) * inv_beta;
        MeanFieldState {
            t,
            sup_norm: mu.sup_norm(),
            u: GridField::new(grid, u).expect("velocity is finite"),
            mu,
            sup_u,
            grad_u_sup,
            excluded,
            free_energy,
            potential,
        }
    }

    /// One finite-volume step.
    pub fn step(&self, state: &MeanFieldState, dt: f64) -> Result<MeanFieldState> {
        let next = self.step_values(state.mu.values(), &state.potential, dt)?;
        Ok(self.state(state.t + dt, GridDensity::from_raw(*self.grid(), next)))
    }

    pub(crate) fn step_values(&self, mu: &[f64], potential: &[f64], dt: f64) -> Result<Vec<f64>> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
        }
        let n = mu.len();
        let h = self.grid().h();
        let r = dt / (self.beta * h * h);
        let mut fwd = vec![0.0; n - 1];
        let mut bwd = vec![0.0; n - 1];
        face_weights(potential, self.beta, &mut fwd, &mut bwd);
        let next = match self.mode {
            StepMode::Explicit => {
                let mut limit = self.explicit_limit();
                for k in 0..n {
                    let mut out = 0.0;
                    if k + 1 < n {
                        out += fwd[k];
                    }
                    if k > 0 {
                        out += bwd[k - 1];
                    }
                    if out > 0.0 {
                        limit = limit.min(self.beta * h * h / out);
                    }
                }
                if dt > limit {
                    return Err(Error::Cfl { dt, limit });
                }
                let mut out = vec![0.0; n];
                explicit_line_update(&fwd, &bwd, r, mu, &mut out);
                out
            }
            StepMode::SemiImplicit => {
                let mut out = mu.to_vec();
                let mut scratch = vec![0.0; n];
                implicit_line_solve(&fwd, &bwd, r, &mut out, &mut scratch);
                out
            }
        };
        assert!(next.iter().all(|v| *v >= 0.0), "finite-volume step produced a negative density");
        Ok(next)
    }

    /// Evolves to `t_end`, keeping snapshots every `snapshot_dt` (rounded to whole steps).
    pub fn run(
        &self,
        mu0: GridDensity,
        dt: f64,
        t_end: f64,
        snapshot_dt: f64,
        reference: Option<&GridDensity>,
    ) -> Result<MeanFieldRun> {
        let n_steps = (t_end / dt).round() as usize;
        let every = ((snapshot_dt / dt).round() as usize).max(1);
        let mut state = self.state(0.0, mu0);
        let mut energies = vec![state.free_energy];
        let mut snapshots = vec![state.clone()];
        let mut snap_steps = vec![0usize];
        for step in 1..=n_steps {
            state = self.step(&state, dt)?;
            state.t = step as f64 * dt;
            energies.push(state.free_energy);
            if (step.is_multiple_of(every) || step == n_steps) && *snap_steps.last().unwrap() != step {
                snapshots.push(state.clone());
                snap_steps.push(step);
            }
        }
        let records = snapshots
            .iter()
            .zip(&snap_steps)
            .map(|(s, &i)| {
                let lhs = time_derivative(&energies, i, dt);
                MeanFieldRecord {
                    t: s.t,
                    free_energy: s.free_energy,
                    dissipation_lhs: lhs,
                    dissipation_rhs: -kinetic(s),
                    sup_mu: s.sup_norm,
                    sup_u: s.sup_u,
                    sup_grad_u: s.grad_u_sup,
                    l1_dist_to_equilibrium: reference.map_or(f64::NAN, |r| s.mu.l1_distance(r)),
                }
            })
            .collect();
        Ok(MeanFieldRun { snapshots, records })
    }
}

/// Centered difference at interior indices, one-sided at the ends.
pub(crate) fn time_derivative(series: &[f64], i: usize, dt: f64) -> f64 {
    let n = series.len();
    if n < 2 {
        return 0.0;
    }
    if i == 0 {
        (series[1] - series[0]) / dt
    } else if i == n - 1 {
        (series[n - 1] - series[n - 2]) / dt
    } else {
        (series[i + 1] - series[i - 1]) / (2.0 * dt)
    }
}

/// `∫ |u|² dμ`.
fn kinetic(state: &MeanFieldState) -> f64 {
    let h = state.mu.grid().h();
    state.mu.values().iter().zip(state.u.values()).map(|(m, u)| h * m * u * u).sum()
}

/// One step from a bare density; convenience wrapper around [`MeanFieldSolver`].
pub fn mf_step(
    mu: &GridDensity,
    kernel: &KernelSpec,
    conf: &ConfinementSpec,
    beta: f64,
    dt: f64,
    mode: StepMode,
) -> Result<MeanFieldState> {
    let solver = MeanFieldSolver::new(kernel, conf, beta, mu.grid(), mode)?;
    let state = solver.state(0.0, mu.clone());
    solver.step(&state, dt)
}

/// `(d/dt F, -∫|u|² dμ)` across two consecutive states; the right side is averaged over both ends.
pub fn mf_dissipation(prev: &MeanFieldState, next: &MeanFieldState) -> (f64, f64) {
    let dt = next.t - prev.t;
    let lhs = (next.free_energy - prev.free_energy) / dt;
    let rhs = -0.5 * (kinetic(prev) + kinetic(next));
    (lhs, rhs)
}

/// `(sup |u|, sup |∂u|, excluded cells)`.
pub fn velocity_norms(state: &MeanFieldState) -> (f64, f64, usize) {
    (state.sup_u, state.grad_u_sup, state.excluded)
}
