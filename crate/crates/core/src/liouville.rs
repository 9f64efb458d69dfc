//! Joint N-body Fokker–Planck equation on a tensor grid (N = 2, 3, d = 1)
//!
//! ```text
//! ∂_t f = (1/β) Δf + Σ_i ∂_i ( f ∂_i H_N ),
//! H_N(X) = (1/2N) Σ_{i≠j} g(x_i - x_j) + Σ_i V(x_i)
//! ```
//!
//! Each coordinate direction is a one-dimensional Scharfetter–Gummel problem
//! along grid lines, with the same face weights as the mean-field solver. A
//! step applies one sweep per direction and averages over every sweep order.
//! The average keeps the scheme exactly exchangeable, positive and mass
//! conserving, and the discrete Gibbs state is stationary for every order.
//!
//! Kernel values on a pair of cells are cell × cell averages; on the diagonal
//! this is the average over the square, which is finite for the log and Riesz
//! families.

use serde::Serialize;

use crate::diagnostics::{self, PiecewiseLinear, TheoryConstants};
use crate::equilibrium::{self, LsiOptions};
use crate::error::{Error, Result};
use crate::grid::{self, ConvTables, Grid1D, GridDensity, GridField};
use crate::kernels::{ConfinementSpec, KernelFamily, KernelSpec};
use crate::meanfield::{self, MeanFieldSolver, MeanFieldState, StepMode};
use crate::quad;

/// Largest joint array, in cells.
pub const MAX_JOINT_CELLS: usize = 1 << 27;

/// Mass tolerance for [`JointDensity::new`].
const MASS_TOL: f64 = 1e-10;

/// Mass where the reference vanishes that is still treated as rounding.
const CONTINUITY_FLOOR: f64 = 1e-12;

fn joint_len(n_cells: usize, n: usize) -> Result<usize> {
    if !(2..=3).contains(&n) {
        return Err(Error::InvalidInput(format!("joint densities need N = 2 or 3, got {n}")));
    }
    let cells = n_cells.checked_pow(n as u32).unwrap_or(usize::MAX);
    if cells > MAX_JOINT_CELLS {
        return Err(Error::MemoryBudget { cells, budget: MAX_JOINT_CELLS });
    }
    Ok(cells)
}

#[inline]
fn decode(mut idx: usize, n_cells: usize, n: usize) -> [usize; 3] {
    let mut t = [0; 3];
    for i in (0..n).rev() {
        t[i] = idx % n_cells;
        idx /= n_cells;
    }
    t
}

#[inline]
fn encode(t: &[usize], n_cells: usize) -> usize {
    t.iter().fold(0, |acc, &a| acc * n_cells + a)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    match n {
        2 => vec![vec![0, 1], vec![1, 0]],
        3 => vec![vec![0, 1, 2], vec![0, 2, 1], vec![1, 0, 2], vec![1, 2, 0], vec![2, 0, 1], vec![2, 1, 0]],
        _ => vec![(0..n).collect()],
    }
}

/// Cell averages of a density on `grid^N`; coordinate 0 varies slowest.
#[derive(Debug, Clone)]
pub struct JointDensity {
    grid: Grid1D,
    n: usize,
    values: Vec<f64>,
}

impl JointDensity {
    pub fn new(grid: Grid1D, n: usize, values: Vec<f64>) -> Result<Self> {
        let len = joint_len(grid.n_cells(), n)?;
        if values.len() != len {
            return Err(Error::InvalidInput(format!("expected {len} values, got {}", values.len())));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput("joint density values must be finite and nonnegative".into()));
        }
        let out = Self { grid, n, values };
        let mass = out.mass();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidInput(format!("joint density has mass {mass}")));
        }
        Ok(out)
    }

    pub fn from_unnormalized(grid: Grid1D, n: usize, mut values: Vec<f64>) -> Result<Self> {
        let len = joint_len(grid.n_cells(), n)?;
        if values.len() != len {
            return Err(Error::InvalidInput(format!("expected {len} values, got {}", values.len())));
        }
        let vol = grid.h().powi(n as i32);
        let mass = vol * values.iter().sum::<f64>();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::InvalidInput(format!("cannot normalize a joint density of mass {mass}")));
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Self::new(grid, n, values)
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    /// Number of particles N.
    pub fn particles(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `h^N`.
    pub fn cell_volume(&self) -> f64 {
        self.grid.h().powi(self.n as i32)
    }

    pub fn mass(&self) -> f64 {
        self.cell_volume() * self.values.iter().sum::<f64>()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// `max |f - f∘σ| / sup f` over adjacent transpositions σ.
    pub fn symmetry_defect(&self) -> f64 {
        let nc = self.grid.n_cells();
        let mut worst = 0.0_f64;
        for (idx, &v) in self.values.iter().enumerate() {
            let t = decode(idx, nc, self.n);
            for i in 0..self.n - 1 {
                let mut s = t;
                s.swap(i, i + 1);
                worst = worst.max((v - self.values[encode(&s[..self.n], nc)]).abs());
            }
        }
        let sup = self.sup_norm();
        if sup > 0.0 {
            worst / sup
        } else {
            0.0
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetry_defect() <= 1e-12
    }

    /// Density of coordinate `i`.
    pub fn coordinate_marginal(&self, i: usize) -> Vec<f64> {
        let nc = self.grid.n_cells();
        let rest = self.grid.h().powi(self.n as i32 - 1);
        let mut out = vec![0.0; nc];
        for (idx, &v) in self.values.iter().enumerate() {
            out[decode(idx, nc, self.n)[i]] += v;
        }
        out.iter_mut().for_each(|v| *v *= rest);
        out
    }

    /// Average of the coordinate marginals.
    pub fn marginal(&self) -> GridDensity {
        let nc = self.grid.n_cells();
        let mut out = vec![0.0; nc];
        for i in 0..self.n {
            for (o, m) in out.iter_mut().zip(self.coordinate_marginal(i)) {
                *o += m / self.n as f64;
            }
        }
        GridDensity::from_raw(self.grid, out)
    }

    /// Density of the pair `(x_i, x_j)`, `i ≠ j`, row-major in `(a_i, a_j)`.
    pub fn pair_marginal(&self, i: usize, j: usize) -> Vec<f64> {
        let nc = self.grid.n_cells();
        let mut out = vec![0.0; nc * nc];
        for (idx, &v) in self.values.iter().enumerate() {
            let t = decode(idx, nc, self.n);
            out[t[i] * nc + t[j]] += v;
        }
        let rest = self.grid.h().powi(self.n as i32 - 2);
        out.iter_mut().for_each(|v| *v *= rest);
        out
    }

    /// `h^N Σ |f - g|`.
    pub fn l1_distance(&self, other: &JointDensity) -> f64 {
        self.cell_volume() * self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    pub fn sup_distance(&self, other: &JointDensity) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn check_compatible(&self, other: &JointDensity) -> Result<()> {
        if self.grid != other.grid || self.n != other.n {
            return Err(Error::InvalidInput("joint densities live on different grids".into()));
        }
        Ok(())
    }
}

/// Initial data for [`build_joint`].
#[derive(Debug, Clone, Copy)]
pub enum JointInit<'a> {
    /// `μ^{⊗N}`.
    Product(&'a GridDensity),
    /// `Q_{N,β}(μ) ∝ exp(-β N F_N(·, μ)) μ^{⊗N}`.
    ModulatedGibbs(&'a GridDensity),
    /// `P_{N,β} ∝ exp(-β H_N)` on the given grid.
    Gibbs(&'a ConfinementSpec, Grid1D),
    /// Exchangeable mixture with 1-marginal `(μ_a + μ_b) / 2`: the symmetrization
    /// of `μ_a ⊗ μ_b` for N = 2 and of `μ_a ⊗ μ_b ⊗ (μ_a + μ_b)/2` for N = 3.
    Mixture(&'a GridDensity, &'a GridDensity),
}

pub fn build_joint(init: JointInit, kernel: &KernelSpec, beta: f64, n: usize) -> Result<JointDensity> {
    match init {
        JointInit::Product(mu) => product(&vec![mu.values(); n], *mu.grid()),
        JointInit::ModulatedGibbs(mu) => Ok(modulated_gibbs(mu, kernel, beta, n)?.q),
        JointInit::Gibbs(conf, grid) => {
            let tables = ConvTables::new(kernel, &grid)?;
            let len = joint_len(grid.n_cells(), n)?;
            let v = equilibrium::confinement_on_grid(conf, &grid);
            let g_row = pair_row(&tables);
            let mut logw: Vec<f64> = (0..len)
                .map(|idx| -beta * hamiltonian(&decode(idx, grid.n_cells(), n)[..n], &g_row, &v))
                .collect();
            exp_shifted(&mut logw)?;
            JointDensity::from_unnormalized(grid, n, logw)
        }
        JointInit::Mixture(a, b) => {
            if a.grid() != b.grid() {
                return Err(Error::InvalidInput("mixture components live on different grids".into()));
            }
            let mid: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| 0.5 * (x + y)).collect();
            let comps: Vec<&[f64]> = match n {
                2 => vec![a.values(), b.values()],
                3 => vec![a.values(), b.values(), &mid],
                _ => return Err(Error::InvalidInput(format!("joint densities need N = 2 or 3, got {n}"))),
            };
            let grid = *a.grid();
            let perms = permutations(n);
            let mut acc = vec![0.0; joint_len(grid.n_cells(), n)?];
            for p in &perms {
                let ordered: Vec<&[f64]> = p.iter().map(|&i| comps[i]).collect();
                for (o, v) in acc.iter_mut().zip(product(&ordered, grid)?.values) {
                    *o += v / perms.len() as f64;
                }
            }
            JointDensity::new(grid, n, acc)
        }
    }
}

fn product(factors: &[&[f64]], grid: Grid1D) -> Result<JointDensity> {
    let n = factors.len();
    let nc = grid.n_cells();
    let len = joint_len(nc, n)?;
    let values = (0..len)
        .map(|idx| {
            let t = decode(idx, nc, n);
            (0..n).map(|i| factors[i][t[i]]).product()
        })
        .collect();
    JointDensity::from_unnormalized(grid, n, values)
}

/// Replaces log-weights by `exp(w - max w)`.
fn exp_shifted(logw: &mut [f64]) -> Result<f64> {
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::Overflow("joint log-weights are not finite".into()));
    }
    logw.iter_mut().for_each(|w| *w = (*w - top).exp());
    Ok(top)
}

fn pair_row(tables: &ConvTables) -> Vec<f64> {
    (0..tables.grid().n_cells()).map(|m| tables.pair_average(m)).collect()
}

/// `(1/2N) Σ_{i≠j} G + Σ V` on a cell tuple.
fn hamiltonian(t: &[usize], g_row: &[f64], v: &[f64]) -> f64 {
    let n = t.len();
    let mut pair = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            pair += g_row[t[i].abs_diff(t[j])];
        }
    }
    pair / n as f64 + t.iter().map(|&a| v[a]).sum::<f64>()
}

/// `F_N(·, μ)` on every cell tuple:
/// `(1/N²) Σ_{i<j} G_{a_i a_j} - (1/N) Σ_i (g * μ)_{a_i} + ½ ∬ g dμ dμ`.
fn energy_table(tables: &ConvTables, mu: &[f64], n: usize) -> Result<Vec<f64>> {
    let nc = mu.len();
    let len = joint_len(nc, n)?;
    let h = tables.grid().h();
    let g_row = pair_row(tables);
    let conv = tables.cell_conv(mu);
    let background = 0.5 * h * mu.iter().zip(&conv).map(|(a, b)| a * b).sum::<f64>();
    let nf = n as f64;
    Ok((0..len)
        .map(|idx| {
            let t = decode(idx, nc, n);
            let mut pair = 0.0;
            let mut cross = 0.0;
            for i in 0..n {
                cross += conv[t[i]];
                for j in (i + 1)..n {
                    pair += g_row[t[i].abs_diff(t[j])];
                }
            }
            pair / (nf * nf) - cross / nf + background
        })
        .collect())
}

/// The modulated Gibbs measure with its normalization.
#[derive(Debug, Clone)]
pub struct ModulatedGibbs {
    pub q: JointDensity,
    /// `log K_{N,β}(μ)` by direct summation.
    pub log_k: f64,
}

pub fn modulated_gibbs(mu: &GridDensity, kernel: &KernelSpec, beta: f64, n: usize) -> Result<ModulatedGibbs> {
    let tables = ConvTables::new(kernel, mu.grid())?;
    let table = energy_table(&tables, mu.values(), n)?;
    modulated_gibbs_with(mu, &table, beta, n)
}

fn modulated_gibbs_with(mu: &GridDensity, table: &[f64], beta: f64, n: usize) -> Result<ModulatedGibbs> {
    let grid = *mu.grid();
    let nc = grid.n_cells();
    let log_mu: Vec<f64> = mu.values().iter().map(|&m| if m > 0.0 { m.ln() } else { f64::NEG_INFINITY }).collect();
    let mut w: Vec<f64> = table
        .iter()
        .enumerate()
        .map(|(idx, &f)| {
            let t = decode(idx, nc, n);
            -beta * n as f64 * f + t[..n].iter().map(|&a| log_mu[a]).sum::<f64>()
        })
        .collect();
    let top = exp_shifted(&mut w)?;
    let vol = grid.h().powi(n as i32);
    let log_k = top + (vol * w.iter().sum::<f64>()).ln();
    Ok(ModulatedGibbs { q: JointDensity::from_unnormalized(grid, n, w)?, log_k })
}

/// `(1/N) h^N Σ f log(f / g)`.
pub fn relative_entropy(f: &JointDensity, g: &JointDensity) -> Result<f64> {
    f.check_compatible(g)?;
    let vol = f.cell_volume();
    let mut acc = 0.0;
    let mut orphan = 0.0;
    for (&a, &b) in f.values.iter().zip(&g.values) {
        if a <= 0.0 {
            continue;
        }
        if b <= 0.0 {
            orphan += vol * a;
            continue;
        }
        acc += a * (a / b).ln();
    }
    if orphan > CONTINUITY_FLOOR {
        return Err(Error::AbsoluteContinuity { mass: orphan });
    }
    Ok(vol * acc / f.n as f64)
}

/// `H_N(f | μ^{⊗N})` without forming the product.
fn entropy_to_product(f: &JointDensity, mu: &[f64]) -> Result<f64> {
    let nc = f.grid.n_cells();
    let vol = f.cell_volume();
    let log_mu: Vec<f64> = mu.iter().map(|&m| if m > 0.0 { m.ln() } else { f64::NEG_INFINITY }).collect();
    let mut acc = 0.0;
    let mut orphan = 0.0;
    for (idx, &a) in f.values.iter().enumerate() {
        if a <= 0.0 {
            continue;
        }
        let t = decode(idx, nc, f.n);
        let lp: f64 = t[..f.n].iter().map(|&k| log_mu[k]).sum();
        if lp == f64::NEG_INFINITY {
            orphan += vol * a;
            continue;
        }
        acc += a * (a.ln() - lp);
    }
    if orphan > CONTINUITY_FLOOR {
        return Err(Error::AbsoluteContinuity { mass: orphan });
    }
    Ok(vol * acc / f.n as f64)
}

/// `E_N = H_N(f | μ^{⊗N}) / β + ∫ F_N df` and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModulatedFreeEnergy {
    pub h_rel: f64,
    pub mean_f: f64,
    pub e_n: f64,
}

pub fn modulated_free_energy(
    f: &JointDensity,
    mu: &GridDensity,
    kernel: &KernelSpec,
    beta: f64,
) -> Result<ModulatedFreeEnergy> {
    if mu.grid() != f.grid() {
        return Err(Error::InvalidInput("f and μ live on different grids".into()));
    }
    let tables = ConvTables::new(kernel, mu.grid())?;
    let table = energy_table(&tables, mu.values(), f.n)?;
    free_energy_with(f, mu.values(), &table, beta)
}

fn free_energy_with(f: &JointDensity, mu: &[f64], table: &[f64], beta: f64) -> Result<ModulatedFreeEnergy> {
    let h_rel = entropy_to_product(f, mu)?;
    let mean_f = f.cell_volume() * f.values.iter().zip(table).map(|(a, b)| a * b).sum::<f64>();
    Ok(ModulatedFreeEnergy { h_rel, mean_f, e_n: h_rel / beta + mean_f })
}

/// `(1/N) ∫ |∇ √(f/Q)|² dQ` with differences across cell faces and `Q`
/// averaged onto the face.
pub fn modulated_fisher(f: &JointDensity, q: &JointDensity) -> Result<f64> {
    f.check_compatible(q)?;
    let nc = f.grid.n_cells();
    let h = f.grid.h();
    let vol = f.cell_volume();
    let mut orphan = 0.0;
    let root: Vec<f64> = f
        .values
        .iter()
        .zip(&q.values)
        .map(|(&a, &b)| {
            if b > 0.0 {
                (a / b).sqrt()
            } else {
                orphan += vol * a;
                0.0
            }
        })
        .collect();
    if orphan > CONTINUITY_FLOOR {
        return Err(Error::AbsoluteContinuity { mass: orphan });
    }
    let mut acc = 0.0;
    for i in 0..f.n {
        let stride = nc.pow((f.n - 1 - i) as u32);
        for idx in 0..root.len() {
            if decode(idx, nc, f.n)[i] + 1 == nc {
                continue;
            }
            let next = idx + stride;
            let (qa, qb) = (q.values[idx], q.values[next]);
            if qa <= 0.0 || qb <= 0.0 {
                continue;
            }
            let d = (root[next] - root[idx]) / h;
            acc += 0.5 * (qa + qb) * d * d;
        }
    }
    Ok(vol * acc / f.n as f64)
}

/// Average of `r φ'(r)` over a pair of cells `m` apart.
fn virial_pair_average(kernel: &KernelSpec, tables: &ConvTables, m: usize) -> f64 {
    let h = tables.grid().h();
    match kernel.family() {
        KernelFamily::Log => -1.0,
        KernelFamily::Riesz { s } => -s * tables.pair_average(m),
        KernelFamily::Smooth(_) => {
            if m == 0 {
                return kernel.virial_cell_average(h);
            }
            let rule = quad::gauss_legendre(16);
            let mh = m as f64 * h;
            let w = |r: f64| r * kernel.radial_derivative(r);
            let left = quad::integrate(&rule, -h, 0.0, |t| (h + t) * w(mh + t));
            let right = quad::integrate(&rule, 0.0, h, |t| (h - t) * w(mh + t));
            (left + right) / (h * h)
        }
    }
}

/// `E_f [ ∬_{x≠y} (u(x) - u(y)) g'(x - y) d(emp - μ)^{⊗2} ]`.
///
/// On a pair of cells `u(x) - u(y)` is replaced by the divided difference of
/// `u` times `x - y`, which turns the singular pair term into cell averages of
/// `r φ'(r)`. The terms against `μ` are exact for the piecewise-linear `u`.
pub fn expected_commutator(f: &JointDensity, u: &GridField, mu: &GridDensity, kernel: &KernelSpec) -> Result<f64> {
    if u.grid() != f.grid() || mu.grid() != f.grid() {
        return Err(Error::InvalidInput("f, u and μ live on different grids".into()));
    }
    let tables = ConvTables::new(kernel, f.grid())?;
    expected_commutator_with(f, u, mu, kernel, &tables)
}

fn expected_commutator_with(
    f: &JointDensity,
    u: &GridField,
    mu: &GridDensity,
    kernel: &KernelSpec,
    tables: &ConvTables,
) -> Result<f64> {
    let grid = *f.grid();
    let nc = grid.n_cells();
    let h = grid.h();
    let n = f.n as f64;
    if kernel.is_zero() {
        return Ok(0.0);
    }
    let uv = u.values();
    let du = grid::central_diff(uv, h);
    let vir: Vec<f64> = (0..nc).map(|m| virial_pair_average(kernel, tables, m)).collect();
    let mut pair = 0.0;
    for i in 0..f.n {
        for j in (i + 1)..f.n {
            let p = f.pair_marginal(i, j);
            for a in 0..nc {
                for b in 0..nc {
                    let w = p[a * nc + b];
                    if w == 0.0 {
                        continue;
                    }
                    let slope = if a == b { du[a] } else { (uv[a] - uv[b]) / ((a as f64 - b as f64) * h) };
                    pair += w * slope * vir[a.abs_diff(b)];
                }
            }
        }
    }
    pair *= h * h;
    let pl = PiecewiseLinear::new(u);
    let marginal = f.marginal();
    let cross: f64 = (0..nc)
        .filter(|&a| marginal.values()[a] != 0.0)
        .map(|a| marginal.values()[a] * h * diagnostics::commutator_inner(&pl, kernel, mu.values(), grid.center(a)))
        .sum();
    let background = diagnostics::commutator_background(&pl, kernel, mu.values());
    Ok(2.0 * pair / (n * n) - 2.0 * cross + background)
}

/// Additive error `o_N` for the kernel: the Riesz/log bound, or `max(φ(0), 0) / 2N`
/// for the bounded positive semidefinite kernels.
pub fn additive_error(n: usize, sup_mu: f64, kernel: &KernelSpec, constants: &TheoryConstants) -> Result<f64> {
    if kernel.riesz_exponent().is_some() {
        Ok(diagnostics::error_terms(n, sup_mu, kernel, constants, None)?.o_n)
    } else {
        Ok(kernel.radial(0.0).max(0.0) / (2.0 * n as f64))
    }
}

/// Joint and mean-field state at one snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FreeEnergyRecord {
    pub t: f64,
    /// `H_N(f | (μ^t)^{⊗N})`.
    pub h_rel: f64,
    pub mean_f: f64,
    pub e_n: f64,
    /// `e_n + o_n`.
    pub e_script: f64,
    /// `(1/N) ∫ |∇ √(f/Q)|² dQ` with `Q = Q_{N,β}(μ^t)`.
    pub fisher: f64,
    pub commutator: f64,
    /// Grönwall right-hand side; NaN when no LSI certificate is available.
    pub bound_rhs: f64,
    /// `H_N(f | Q)`.
    pub h_q: f64,
    pub log_k: f64,
    pub o_n: f64,
    pub sup_mu: f64,
    pub grad_u_sup: f64,
    /// Convexity certificate of `μ^t` against `μ_β`; NaN without a reference.
    pub kappa: f64,
    pub c_ls: f64,
    /// Time derivative of `e_n` at the snapshot step: centered in the interior,
    /// second-order one-sided at the first and last step.
    pub de_dt: f64,
}

impl FreeEnergyRecord {
    pub const CSV_HEADER: &'static str =
        "t,h_rel,mean_f,e_n,e_script,fisher,commutator,bound_rhs,h_q,log_k,o_n,sup_mu,grad_u_sup,kappa,c_ls,de_dt";

    pub fn csv_row(&self) -> String {
        [
            self.t,
            self.h_rel,
            self.mean_f,
            self.e_n,
            self.e_script,
            self.fisher,
            self.commutator,
            self.bound_rhs,
            self.h_q,
            self.log_k,
            self.o_n,
            self.sup_mu,
            self.grad_u_sup,
            self.kappa,
            self.c_ls,
            self.de_dt,
        ]
        .iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(",")
    }
}

#[derive(Debug, Clone)]
pub struct LiouvilleOptions {
    pub dt: f64,
    pub t_end: f64,
    pub snapshot_dt: f64,
    pub constants: TheoryConstants,
    pub lsi: LsiOptions,
}

#[derive(Debug, Clone)]
pub struct LiouvilleRun {
    pub records: Vec<FreeEnergyRecord>,
    /// 1-marginal of `f` at each snapshot.
    pub marginals: Vec<GridDensity>,
    /// `μ^t` at each snapshot.
    pub mean_field: Vec<GridDensity>,
    pub final_f: JointDensity,
}

/// Tensor-grid solver with precomputed face weights.
///
/// The drift does not depend on time, so the Scharfetter–Gummel weights of
/// every grid line are built once. Lines are indexed by the cells of the
/// other coordinates; the weights do not depend on which direction is swept.
#[derive(Debug, Clone)]
pub struct LiouvilleSolver {
    kernel: KernelSpec,
    beta: f64,
    n: usize,
    mode: StepMode,
    tables: ConvTables,
    v: Vec<f64>,
    fwd: Vec<f64>,
    bwd: Vec<f64>,
    explicit_limit: f64,
    mean_field: MeanFieldSolver,
}

impl LiouvilleSolver {
    pub fn new(
        kernel: &KernelSpec,
        conf: &ConfinementSpec,
        beta: f64,
        grid: &Grid1D,
        n: usize,
        mode: StepMode,
    ) -> Result<Self> {
        let mean_field = MeanFieldSolver::new(kernel, conf, beta, grid, mode)?;
        let nc = grid.n_cells();
        joint_len(nc, n)?;
        let tables = mean_field.tables().clone();
        let v = equilibrium::confinement_on_grid(conf, grid);
        let g_row = pair_row(&tables);
        let lines = nc.pow(n as u32 - 1);
        let mut fwd = vec![0.0; lines * (nc - 1)];
        let mut bwd = vec![0.0; lines * (nc - 1)];
        let h = grid.h();
        let mut explicit_limit = f64::INFINITY;
        let mut potential = vec![0.0; nc];
        for line in 0..lines {
            let others = decode(line, nc, n - 1);
            for (k, p) in potential.iter_mut().enumerate() {
                let pair: f64 = others[..n - 1].iter().map(|&o| g_row[k.abs_diff(o)]).sum();
                *p = pair / n as f64 + v[k];
            }
            let range = line * (nc - 1)..(line + 1) * (nc - 1);
            meanfield::face_weights(&potential, beta, &mut fwd[range.clone()], &mut bwd[range.clone()]);
            let (fw, bw) = (&fwd[range.clone()], &bwd[range]);
            for k in 0..nc {
                let out = if k + 1 < nc { fw[k] } else { 0.0 } + if k > 0 { bw[k - 1] } else { 0.0 };
                if out > 0.0 {
                    explicit_limit = explicit_limit.min(beta * h * h / out);
                }
            }
        }
        Ok(Self { kernel: *kernel, beta, n, mode, tables, v, fwd, bwd, explicit_limit, mean_field })
    }

    pub fn grid(&self) -> &Grid1D {
        self.tables.grid()
    }

    pub fn particles(&self) -> usize {
        self.n
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mean_field(&self) -> &MeanFieldSolver {
        &self.mean_field
    }

    /// Forward-Euler stability bound over all grid lines.
    pub fn explicit_limit(&self) -> f64 {
        self.explicit_limit
    }

    /// The discrete Gibbs state `∝ exp(-β H_N)`, stationary for [`Self::step`].
    pub fn gibbs(&self) -> Result<JointDensity> {
        let nc = self.grid().n_cells();
        let g_row = pair_row(&self.tables);
        let mut w: Vec<f64> = (0..nc.pow(self.n as u32))
            .map(|idx| -self.beta * hamiltonian(&decode(idx, nc, self.n)[..self.n], &g_row, &self.v))
            .collect();
        exp_shifted(&mut w)?;
        JointDensity::from_unnormalized(*self.grid(), self.n, w)
    }

    fn sweep(&self, values: &mut [f64], dir: usize, dt: f64, buf: &mut [f64], scratch: &mut [f64]) {
        let nc = self.grid().n_cells();
        let n = self.n;
        let h = self.grid().h();
        let r = dt / (self.beta * h * h);
        let stride = nc.pow((n - 1 - dir) as u32);
        let lines = nc.pow(n as u32 - 1);
        let mut tuple = [0usize; 3];
        for line in 0..lines {
            let others = decode(line, nc, n - 1);
            let mut o = 0;
            for (i, slot) in tuple.iter_mut().enumerate().take(n) {
                if i == dir {
                    *slot = 0;
                } else {
                    *slot = others[o];
                    o += 1;
                }
            }
            let base = encode(&tuple[..n], nc);
            for (k, b) in buf.iter_mut().enumerate() {
                *b = values[base + k * stride];
            }
            let range = line * (nc - 1)..(line + 1) * (nc - 1);
            let (fw, bw) = (&self.fwd[range.clone()], &self.bwd[range]);
            match self.mode {
                StepMode::SemiImplicit => meanfield::implicit_line_solve(fw, bw, r, buf, scratch),
                StepMode::Explicit => {
                    meanfield::explicit_line_update(fw, bw, r, buf, scratch);
                    buf.copy_from_slice(scratch);
                }
            }
            for (k, b) in buf.iter().enumerate() {
                values[base + k * stride] = *b;
            }
        }
    }

    /// One step: the average over sweep orders of the split steps.
    pub fn step(&self, f: &JointDensity, dt: f64) -> Result<JointDensity> {
        if f.grid() != self.grid() || f.n != self.n {
            return Err(Error::InvalidInput("joint density does not match the solver grid".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
        }
        if self.mode == StepMode::Explicit && dt > self.explicit_limit {
            return Err(Error::Cfl { dt, limit: self.explicit_limit });
        }
        let nc = self.grid().n_cells();
        let perms = permutations(self.n);
        let mut acc = vec![0.0; f.values.len()];
        let mut work = vec![0.0; f.values.len()];
        let mut buf = vec![0.0; nc];
        let mut scratch = vec![0.0; nc];
        let weight = 1.0 / perms.len() as f64;
        for order in &perms {
            work.copy_from_slice(&f.values);
            for &dir in order {
                self.sweep(&mut work, dir, dt, &mut buf, &mut scratch);
            }
            for (a, w) in acc.iter_mut().zip(&work) {
                *a += weight * w;
            }
        }
        assert!(acc.iter().all(|v| *v >= 0.0), "joint step produced a negative density");
        Ok(JointDensity { grid: f.grid, n: f.n, values: acc })
    }

    /// Evolves `f` and `μ` side by side and records the modulated free energy
    /// at every snapshot. With a reference `μ_β` the convexity certificate
    /// and the Grönwall right-hand side are filled in.
    pub fn run(
        &self,
        f0: JointDensity,
        mu0: GridDensity,
        mu_beta: Option<&GridDensity>,
        opts: &LiouvilleOptions,
    ) -> Result<LiouvilleRun> {
        if !(opts.dt > 0.0 && opts.t_end >= 0.0 && opts.snapshot_dt > 0.0) {
            return Err(Error::InvalidInput("dt and snapshot_dt must be positive and t_end nonnegative".into()));
        }
        let dt = opts.dt;
        let n_steps = (opts.t_end / dt).round() as usize;
        let every = ((opts.snapshot_dt / dt).round() as usize).max(1);
        let is_snapshot = |s: usize| s.is_multiple_of(every) || s == n_steps;
        // second-order one-sided differences at the ends need two neighbours
        let needs_energy = |s: usize| (s.saturating_sub(2)..=s + 2).any(|k| k <= n_steps && is_snapshot(k));

        let mut f = f0;
        let mut state = self.mean_field.state(0.0, mu0);
        let mut energies = vec![f64::NAN; n_steps + 1];
        let mut pending: Vec<(usize, FreeEnergyRecord)> = Vec::new();
        let mut marginals = Vec::new();
        let mut mean_field = Vec::new();
        for s in 0..=n_steps {
            if s > 0 {
                f = self.step(&f, dt)?;
                state = self.mean_field.step(&state, dt)?;
                state.t = s as f64 * dt;
            }
            if needs_energy(s) {
                let table = energy_table(&self.tables, state.mu.values(), self.n)?;
                let fe = free_energy_with(&f, state.mu.values(), &table, self.beta)?;
                energies[s] = fe.e_n;
                if is_snapshot(s) {
                    let rec = self.snapshot(&f, &state, &table, fe, mu_beta, opts)?;
                    pending.push((s, rec));
                    marginals.push(f.marginal());
                    mean_field.push(state.mu.clone());
                }
            }
        }
        let mut records: Vec<FreeEnergyRecord> = pending
            .into_iter()
            .map(|(s, mut rec)| {
                let e = |i: usize| energies[i];
                rec.de_dt = if n_steps == 0 {
                    0.0
                } else if n_steps == 1 {
                    (e(1) - e(0)) / dt
                } else if s == 0 {
                    (-3.0 * e(0) + 4.0 * e(1) - e(2)) / (2.0 * dt)
                } else if s == n_steps {
                    (3.0 * e(s) - 4.0 * e(s - 1) + e(s - 2)) / (2.0 * dt)
                } else {
                    (e(s + 1) - e(s - 1)) / (2.0 * dt)
                };
                rec
            })
            .collect();
        if mu_beta.is_some() && records.iter().all(|r| r.kappa > 0.0) {
            let c_ls = records.iter().map(|r| r.c_ls).fold(0.0, f64::max);
            let rhs = gronwall_rhs(&records, self.n, self.beta, c_ls, &opts.constants);
            records.iter_mut().zip(rhs).for_each(|(r, b)| r.bound_rhs = b);
        }
        Ok(LiouvilleRun { records, marginals, mean_field, final_f: f })
    }

    fn snapshot(
        &self,
        f: &JointDensity,
        state: &MeanFieldState,
        table: &[f64],
        fe: ModulatedFreeEnergy,
        mu_beta: Option<&GridDensity>,
        opts: &LiouvilleOptions,
    ) -> Result<FreeEnergyRecord> {
        let gibbs = modulated_gibbs_with(&state.mu, table, self.beta, self.n)?;
        let h_q = relative_entropy(f, &gibbs.q)?;
        let fisher = modulated_fisher(f, &gibbs.q)?;
        let commutator = expected_commutator_with(f, &state.u, &state.mu, &self.kernel, &self.tables)?;
        let o_n = additive_error(self.n, state.sup_norm, &self.kernel, &opts.constants)?;
        let (kappa, c_ls) = match mu_beta {
            Some(reference) => {
                let est = equilibrium::convexity_constant_with(
                    &self.tables,
                    &state.mu,
                    reference,
                    self.mean_field.confinement(),
                    self.beta,
                    &opts.lsi,
                )?;
                (est.kappa, est.c_ls)
            }
            None => (f64::NAN, f64::NAN),
        };
        Ok(FreeEnergyRecord {
            t: state.t,
            h_rel: fe.h_rel,
            mean_f: fe.mean_f,
            e_n: fe.e_n,
            e_script: fe.e_n + o_n,
            fisher,
            commutator,
            bound_rhs: f64::NAN,
            h_q,
            log_k: gibbs.log_k,
            o_n,
            sup_mu: state.sup_norm,
            grad_u_sup: state.grad_u_sup,
            kappa,
            c_ls,
            de_dt: f64::NAN,
        })
    }
}

/// `∫_0^1 e^{δ(1-s)} ds` and `∫_0^1 s e^{δ(1-s)} ds`, stable for small `δ`.
fn exp_weights(delta: f64) -> (f64, f64) {
    if delta.abs() < 1e-4 {
        (1.0 + delta / 2.0 + delta * delta / 6.0, 0.5 + delta / 6.0 + delta * delta / 24.0)
    } else {
        let e = delta.exp_m1();
        (e / delta, (e - delta) / (delta * delta))
    }
}

/// Grönwall right-hand side at every record for a uniform LSI constant `c_ls`:
///
/// ```text
/// e^{A(t)} 𝓔⁰ + e^{A(t)} ∫_0^t e^{-A(τ)} [ȯ + λ (o - log K / (β N))] dτ,
/// A(t) = -λ t + ∫_0^t C ‖∇u‖ / 2,  λ = 4 / (β C_LS).
/// ```
///
/// Between snapshots `A` and the bracket are linear, and the integral is
/// taken exactly for that interpolant (the trapezoid rule on the exponent).
pub fn gronwall_rhs(
    records: &[FreeEnergyRecord],
    n: usize,
    beta: f64,
    c_ls: f64,
    constants: &TheoryConstants,
) -> Vec<f64> {
    if records.is_empty() {
        return Vec::new();
    }
    let lambda = 4.0 / (beta * c_ls);
    let n_part = n as f64;
    let times: Vec<f64> = records.iter().map(|r| r.t).collect();
    let o: Vec<f64> = records.iter().map(|r| r.o_n).collect();
    let o_dot = diagnostics::series_rate(&times, &o).unwrap_or_else(|_| vec![0.0; o.len()]);
    let bracket: Vec<f64> = records
        .iter()
        .zip(&o_dot)
        .map(|(r, od)| od + lambda * (r.o_n - r.log_k / (beta * n_part)))
        .collect();
    let mut out = Vec::with_capacity(records.len());
    let mut a = 0.0;
    let mut integral = 0.0;
    out.push(records[0].e_script);
    for i in 1..records.len() {
        let dt = times[i] - times[i - 1];
        let rate = |j: usize| -lambda + 0.5 * constants.c_me * records[j].grad_u_sup;
        let delta = 0.5 * (rate(i - 1) + rate(i)) * dt;
        let (w0, w1) = exp_weights(delta);
        // e^{A_i - A(τ)} with A linear on the interval
        integral = delta.exp() * integral + dt * (bracket[i - 1] * w0 + (bracket[i] - bracket[i - 1]) * w1);
        a += delta;
        out.push(a.exp() * records[0].e_script + integral);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DissipationRow {
    pub t: f64,
    pub de_dt: f64,
    /// `-(1/β²) I + ½ |commutator|`.
    pub bound: f64,
    /// `bound + tol - de_dt`; negative is a violation.
    pub margin: f64,
    /// `de_dt + (4/β²) I + ½ commutator`, which vanishes for the exact flow.
    pub sharp_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DissipationReport {
    pub tol_disc: f64,
    pub rows: Vec<DissipationRow>,
    pub violations: usize,
    pub worst_margin: f64,
    pub worst_sharp_residual: f64,
    /// Same, leaving out the first and last record, whose derivatives are one-sided.
    pub worst_interior_sharp_residual: f64,
}

/// Checks `dE/dt ≤ -(1/β²) I + ½ |comm| + tol` at every record and reports
/// the residual of the sharp identity `dE/dt = -(4/β²) I - ½ comm`.
pub fn dissipation_audit(records: &[FreeEnergyRecord], beta: f64, tol_disc: f64) -> DissipationReport {
    let rows: Vec<DissipationRow> = records
        .iter()
        .map(|r| {
            let bound = -r.fisher / (beta * beta) + 0.5 * r.commutator.abs();
            DissipationRow {
                t: r.t,
                de_dt: r.de_dt,
                bound,
                margin: bound + tol_disc - r.de_dt,
                sharp_residual: r.de_dt + 4.0 * r.fisher / (beta * beta) + 0.5 * r.commutator,
            }
        })
        .collect();
    DissipationReport {
        tol_disc,
        violations: rows.iter().filter(|r| !(r.margin >= 0.0)).count(),
        worst_margin: rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min),
        worst_sharp_residual: rows.iter().map(|r| r.sharp_residual.abs()).fold(0.0, f64::max),
        worst_interior_sharp_residual: rows
            .iter()
            .skip(1)
            .take(rows.len().saturating_sub(2))
            .map(|r| r.sharp_residual.abs())
            .fold(0.0, f64::max),
        rows,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LsiChainRow {
    pub t: f64,
    pub fisher: f64,
    /// `H_N(f | Q) / C_LS = (β e_n + log K / N) / C_LS`.
    pub rhs: f64,
    /// `(β e_n - log K / N) / C_LS`, the same bound with the opposite sign on `log K`.
    pub rhs_flipped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LsiChainReport {
    pub rows: Vec<LsiChainRow>,
    /// Records with a convexity certificate.
    pub checked: usize,
    pub violations: usize,
    pub violations_flipped: usize,
    pub worst_margin: f64,
}

/// Checks `I ≥ H_N(f | Q) / C_LS` on every record that carries a certificate.
pub fn lsi_chain_audit(records: &[FreeEnergyRecord], n: usize, beta: f64, tol: f64) -> LsiChainReport {
    let nf = n as f64;
    let rows: Vec<LsiChainRow> = records
        .iter()
        .filter(|r| r.kappa > 0.0)
        .map(|r| LsiChainRow {
            t: r.t,
            fisher: r.fisher,
            rhs: (beta * r.e_n + r.log_k / nf) / r.c_ls,
            rhs_flipped: (beta * r.e_n - r.log_k / nf) / r.c_ls,
        })
        .collect();
    LsiChainReport {
        checked: rows.len(),
        violations: rows.iter().filter(|r| r.fisher + tol < r.rhs).count(),
        violations_flipped: rows.iter().filter(|r| r.fisher + tol < r.rhs_flipped).count(),
        worst_margin: rows.iter().map(|r| r.fisher + tol - r.rhs).fold(f64::INFINITY, f64::min),
        rows,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GronwallRow {
    pub t: f64,
    pub e_script: f64,
    pub rhs: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GronwallReport {
    pub c_ls: f64,
    pub rows: Vec<GronwallRow>,
    pub violations: usize,
    pub worst_margin: f64,
    /// Records where `e_n + o_n < 0`.
    pub negative_e_script: usize,
    /// Least-squares decay rate of `H_N(f^t | Q(μ^t))`.
    pub fitted_rate: f64,
    /// `4 / (β C_LS)`.
    pub bound_rate: f64,
    /// `1 / (β C_LS)`.
    pub plain_lsi_rate: f64,
}

/// Checks `𝓔_N^t ≤ RHS + tol` with the worst LSI constant along the records.
pub fn gronwall_audit(
    records: &[FreeEnergyRecord],
    n: usize,
    beta: f64,
    constants: &TheoryConstants,
    tol: f64,
) -> Result<GronwallReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to audit".into()));
    }
    if let Some(bad) = records.iter().find(|r| !(r.kappa > 0.0)) {
        return Err(Error::InvalidLsi { t: bad.t, kappa: bad.kappa });
    }
    let c_ls = records.iter().map(|r| r.c_ls).fold(0.0, f64::max);
    let rhs = gronwall_rhs(records, n, beta, c_ls, constants);
    let rows: Vec<GronwallRow> = records
        .iter()
        .zip(rhs)
        .map(|(r, b)| GronwallRow { t: r.t, e_script: r.e_script, rhs: b, margin: b + tol - r.e_script })
        .collect();
    let times: Vec<f64> = records.iter().map(|r| r.t).collect();
    let h: Vec<f64> = records.iter().map(|r| r.h_q).collect();
    Ok(GronwallReport {
        c_ls,
        violations: rows.iter().filter(|r| !(r.margin >= 0.0)).count(),
        worst_margin: rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min),
        negative_e_script: records.iter().filter(|r| r.e_script < 0.0).count(),
        fitted_rate: decay_rate(&times, &h),
        bound_rate: 4.0 / (beta * c_ls),
        plain_lsi_rate: 1.0 / (beta * c_ls),
        rows,
    })
}

/// Least-squares slope of `-log y` over samples above the noise floor.
pub fn decay_rate(times: &[f64], values: &[f64]) -> f64 {
    let floor = values.first().map_or(0.0, |v| 1e-10 * v.abs()).max(1e-13);
    let pts: Vec<(f64, f64)> =
        times.iter().zip(values).filter(|(_, v)| **v > floor).map(|(t, v)| (*t, v.ln())).collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let m = pts.len() as f64;
    let tb = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let yb = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - tb) * (p.1 - yb)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - tb) * (p.0 - tb)).sum();
    -sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{solve_thermal_equilibrium, EquilibriumOptions};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero() -> KernelSpec {
        KernelSpec::zero(1).unwrap()
    }

    fn log() -> KernelSpec {
        KernelSpec::log(1).unwrap()
    }

    fn x2() -> ConfinementSpec {
        ConfinementSpec::quadratic(2.0, 1).unwrap()
    }

    /// Gaussian sampled at the centers, so sums are spectrally accurate quadratures.
    fn point_gaussian(grid: Grid1D, mean: f64, var: f64) -> GridDensity {
        let values = grid.centers().iter().map(|x| (-(x - mean).powi(2) / (2.0 * var)).exp()).collect();
        GridDensity::from_unnormalized(grid, values).unwrap()
    }

    fn opts(dt: f64, t_end: f64, snapshot_dt: f64) -> LiouvilleOptions {
        LiouvilleOptions { dt, t_end, snapshot_dt, constants: TheoryConstants::default(), lsi: LsiOptions::default() }
    }

    #[test]
    fn budget_and_shape_checks() {
        let grid = Grid1D::new(0.0, 1.0, 600).unwrap();
        assert!(matches!(joint_len(600, 3), Err(Error::MemoryBudget { .. })));
        assert!(joint_len(512, 2).is_ok());
        assert!(joint_len(128, 3).is_ok());
        assert!(JointDensity::new(grid, 4, vec![]).is_err());
        let small = Grid1D::new(0.0, 1.0, 16).unwrap();
        assert!(JointDensity::new(small, 2, vec![1.0; 256]).is_ok());
        assert!(JointDensity::new(small, 2, vec![2.0; 256]).is_err());
        assert!(JointDensity::new(small, 2, vec![1.0; 255]).is_err());
    }

    #[test]
    fn zero_kernel_product_is_modulated_gibbs() {
        let grid = Grid1D::new(-4.0, 4.0, 40).unwrap();
        let mu = GridDensity::gaussian(grid, 0.3, 0.7).unwrap();
        for n in [2, 3] {
            let p = build_joint(JointInit::Product(&mu), &zero(), 1.3, n).unwrap();
            let g = modulated_gibbs(&mu, &zero(), 1.3, n).unwrap();
            assert!(p.sup_distance(&g.q) < 1e-12 * p.sup_norm());
            assert_abs_diff_eq!(g.log_k, 0.0, epsilon = 1e-12);
            assert!(p.is_symmetric());
        }
    }

    #[test]
    fn gibbs_is_modulated_gibbs_at_equilibrium() {
        let grid = Grid1D::new(-5.0, 5.0, 80).unwrap();
        let beta = 1.5;
        let eq = solve_thermal_equilibrium(&log(), &x2(), beta, &grid, &EquilibriumOptions::default()).unwrap();
        for n in [2, 3] {
            let q = build_joint(JointInit::ModulatedGibbs(&eq.mu_beta), &log(), beta, n).unwrap();
            let p = build_joint(JointInit::Gibbs(&x2(), grid), &log(), beta, n).unwrap();
            let rel = q
                .values()
                .iter()
                .zip(p.values())
                .filter(|(_, b)| **b > 1e-200)
                .map(|(a, b)| (a / b - 1.0).abs())
                .fold(0.0, f64::max);
            assert!(rel < 1e-6, "N = {n}: {rel}");
        }
    }

    #[test]
    fn mixture_marginal_is_average() {
        let grid = Grid1D::new(-4.0, 4.0, 32).unwrap();
        let a = GridDensity::gaussian(grid, -1.0, 0.5).unwrap();
        let b = GridDensity::gaussian(grid, 1.5, 0.3).unwrap();
        for n in [2, 3] {
            let f = build_joint(JointInit::Mixture(&a, &b), &log(), 1.0, n).unwrap();
            assert!(f.is_symmetric());
            let m = f.marginal();
            for k in 0..32 {
                assert_abs_diff_eq!(m.values()[k], 0.5 * (a.values()[k] + b.values()[k]), epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn gibbs_state_is_stationary() {
        let grid = Grid1D::new(-4.0, 4.0, 48).unwrap();
        for (n, mode, dt) in [(2, StepMode::SemiImplicit, 0.05), (3, StepMode::SemiImplicit, 0.05), (2, StepMode::Explicit, 1e-3)] {
            let solver = LiouvilleSolver::new(&log(), &x2(), 1.0, &grid, n, mode).unwrap();
            let p = solver.gibbs().unwrap();
            let next = solver.step(&p, dt).unwrap();
            assert!(next.sup_distance(&p) < 1e-12 * p.sup_norm(), "{}", next.sup_distance(&p));
        }
    }

    #[test]
    fn explicit_mode_enforces_cfl() {
        let grid = Grid1D::new(-4.0, 4.0, 48).unwrap();
        let solver = LiouvilleSolver::new(&log(), &x2(), 1.0, &grid, 2, StepMode::Explicit).unwrap();
        let p = solver.gibbs().unwrap();
        let dt = 2.0 * solver.explicit_limit();
        assert!(matches!(solver.step(&p, dt), Err(Error::Cfl { .. })));
    }

    #[test]
    fn zero_kernel_is_tensor_product_of_mean_field_steps() {
        let grid = Grid1D::new(-5.0, 5.0, 64).unwrap();
        let beta = 0.8;
        let a = GridDensity::gaussian(grid, 0.5, 0.4).unwrap();
        let solver = LiouvilleSolver::new(&zero(), &x2(), beta, &grid, 2, StepMode::SemiImplicit).unwrap();
        let mf = solver.mean_field();
        let mut f = build_joint(JointInit::Product(&a), &zero(), beta, 2).unwrap();
        let mut state = mf.state(0.0, a);
        for _ in 0..10 {
            f = solver.step(&f, 0.01).unwrap();
            state = mf.step(&state, 0.01).unwrap();
        }
        let expected = build_joint(JointInit::Product(&state.mu), &zero(), beta, 2).unwrap();
        assert!(f.sup_distance(&expected) < 1e-6 * expected.sup_norm(), "{}", f.sup_distance(&expected));
        assert!(f.sup_distance(&expected) < 1e-12);
    }

    #[test]
    fn zero_kernel_marginal_follows_mean_field() {
        let grid = Grid1D::new(-5.0, 5.0, 64).unwrap();
        let a = GridDensity::gaussian(grid, -1.0, 0.3).unwrap();
        let b = GridDensity::gaussian(grid, 1.2, 0.5).unwrap();
        let solver = LiouvilleSolver::new(&zero(), &x2(), 1.0, &grid, 3, StepMode::SemiImplicit).unwrap();
        let f0 = build_joint(JointInit::Mixture(&a, &b), &zero(), 1.0, 3).unwrap();
        let run = solver.run(f0.clone(), f0.marginal(), None, &opts(0.02, 0.4, 0.2)).unwrap();
        for (m, mu) in run.marginals.iter().zip(&run.mean_field) {
            assert!(m.sup_distance(mu) < 1e-6, "{}", m.sup_distance(mu));
        }
    }

    #[test]
    fn symmetry_mass_and_positivity_are_preserved() {
        let grid = Grid1D::new(-4.0, 4.0, 32).unwrap();
        let a = GridDensity::gaussian(grid, -1.0, 0.3).unwrap();
        let b = GridDensity::gaussian(grid, 1.0, 0.6).unwrap();
        let solver = LiouvilleSolver::new(&log(), &x2(), 1.0, &grid, 2, StepMode::SemiImplicit).unwrap();
        let mut f = build_joint(JointInit::Mixture(&a, &b), &log(), 1.0, 2).unwrap();
        for _ in 0..1000 {
            f = solver.step(&f, 0.01).unwrap();
        }
        assert!(f.symmetry_defect() < 1e-12, "{}", f.symmetry_defect());
        assert_abs_diff_eq!(f.mass(), 1.0, epsilon = 1e-10);
        assert!(f.values().iter().all(|v| *v >= 0.0));

        let grid = Grid1D::new(-4.0, 4.0, 16).unwrap();
        let a = GridDensity::gaussian(grid, -1.0, 0.3).unwrap();
        let b = GridDensity::gaussian(grid, 1.0, 0.6).unwrap();
        let solver = LiouvilleSolver::new(&log(), &x2(), 1.0, &grid, 3, StepMode::SemiImplicit).unwrap();
        let mut f = build_joint(JointInit::Mixture(&a, &b), &log(), 1.0, 3).unwrap();
        for _ in 0..200 {
            f = solver.step(&f, 0.01).unwrap();
        }
        assert!(f.symmetry_defect() < 1e-12, "{}", f.symmetry_defect());
    }

    #[test]
    fn gaussian_relative_entropy() {
        let grid = Grid1D::new(-10.0, 10.0, 400).unwrap();
        let (m1, s1, m2, s2) = (0.4, 0.6, -0.2, 1.1);
        let nu = point_gaussian(grid, m1, s1);
        let mu = point_gaussian(grid, m2, s2);
        let f = build_joint(JointInit::Product(&nu), &zero(), 1.0, 2).unwrap();
        let g = build_joint(JointInit::Product(&mu), &zero(), 1.0, 2).unwrap();
        let kl1 = 0.5 * ((s2 / s1).ln() + (s1 + (m1 - m2).powi(2)) / s2 - 1.0);
        assert_abs_diff_eq!(relative_entropy(&f, &g).unwrap(), kl1, epsilon = 1e-6);
        assert_abs_diff_eq!(relative_entropy(&f, &f).unwrap(), 0.0, epsilon = 1e-15);
        assert!(relative_entropy(&g, &f).unwrap() >= 0.0);
    }

    #[test]
    fn relative_entropy_detects_missing_support() {
        let grid = Grid1D::new(-4.0, 4.0, 32).unwrap();
        let wide = GridDensity::gaussian(grid, 0.0, 1.0).unwrap();
        let narrow = GridDensity::uniform(grid, -1.0, 1.0).unwrap();
        let f = build_joint(JointInit::Product(&wide), &zero(), 1.0, 2).unwrap();
        let g = build_joint(JointInit::Product(&narrow), &zero(), 1.0, 2).unwrap();
        assert!(matches!(relative_entropy(&f, &g), Err(Error::AbsoluteContinuity { .. })));
        assert!(matches!(modulated_fisher(&f, &g), Err(Error::AbsoluteContinuity { .. })));
        assert!(relative_entropy(&g, &f).is_ok());
    }

    #[test]
    fn uniform_product_free_energy() {
        // ∬ -log|x-y| over the unit square is 3/2
        let grid = Grid1D::new(0.0, 1.0, 64).unwrap();
        let mu = GridDensity::uniform(grid, 0.0, 1.0).unwrap();
        let f = build_joint(JointInit::Product(&mu), &log(), 1.0, 2).unwrap();
        let fe = modulated_free_energy(&f, &mu, &log(), 1.0).unwrap();
        assert_abs_diff_eq!(fe.h_rel, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(fe.e_n, -0.375, epsilon = 1e-12);
        // N = 3: -(1/2N) ∬ g = -1/4
        let f3 = build_joint(JointInit::Product(&mu), &log(), 1.0, 3).unwrap();
        assert_abs_diff_eq!(modulated_free_energy(&f3, &mu, &log(), 1.0).unwrap().e_n, -0.25, epsilon = 1e-12);
    }

    #[test]
    fn zero_kernel_free_energy_is_entropy() {
        let grid = Grid1D::new(-4.0, 4.0, 40).unwrap();
        let a = GridDensity::gaussian(grid, -1.0, 0.3).unwrap();
        let b = GridDensity::gaussian(grid, 1.0, 0.6).unwrap();
        let f = build_joint(JointInit::Mixture(&a, &b), &zero(), 1.0, 2).unwrap();
        let mu = GridDensity::gaussian(grid, 0.0, 1.0).unwrap();
        let fe = modulated_free_energy(&f, &mu, &zero(), 2.0).unwrap();
        assert_eq!(fe.mean_f, 0.0);
        assert_eq!(fe.e_n, fe.h_rel / 2.0);
    }

    fn random_density<R: Rng>(grid: Grid1D, rng: &mut R) -> GridDensity {
        let comps: Vec<(f64, f64, f64)> =
            (0..3).map(|_| (rng.random_range(-2.0..2.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0))).collect();
        GridDensity::from_fn(grid, |x| comps.iter().map(|(m, v, w)| w * (-(x - m).powi(2) / (2.0 * v)).exp()).sum())
            .unwrap()
    }

    #[test]
    fn rewriting_identity_holds_and_fixes_the_sign_of_log_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grid = Grid1D::new(-6.0, 6.0, 64).unwrap();
        for trial in 0..20 {
            let beta = rng.random_range(0.3..3.0);
            let mu = random_density(grid, &mut rng);
            let a = random_density(grid, &mut rng);
            let b = random_density(grid, &mut rng);
            let f = build_joint(JointInit::Mixture(&a, &b), &log(), beta, 2).unwrap();
            let fe = modulated_free_energy(&f, &mu, &log(), beta).unwrap();
            let gibbs = modulated_gibbs(&mu, &log(), beta, 2).unwrap();
            let h_q = relative_entropy(&f, &gibbs.q).unwrap();
            let rewritten = (h_q - gibbs.log_k / 2.0) / beta;
            assert!((fe.e_n - rewritten).abs() < 1e-6 * (1.0 + fe.e_n.abs()), "trial {trial}");
            // with the opposite sign the two sides differ by log K / (β N)
            let flipped = (h_q + gibbs.log_k / 2.0) / beta;
            assert_abs_diff_eq!(flipped - fe.e_n, gibbs.log_k / beta, epsilon = 1e-9);
        }
    }

    #[test]
    fn gaussian_fisher_information() {
        let grid = Grid1D::new(-10.0, 10.0, 400).unwrap();
        let (m1, s1, m2, s2) = (0.4, 0.6, -0.2, 1.1);
        let nu = point_gaussian(grid, m1, s1);
        let mu = point_gaussian(grid, m2, s2);
        let f = build_joint(JointInit::Product(&nu), &zero(), 1.0, 2).unwrap();
        let q = modulated_gibbs(&mu, &zero(), 1.0, 2).unwrap().q;
        // ¼ E_ν |∇ log(ν/μ)|² with ∇ log(ν/μ) = a x + b
        let a = 1.0 / s2 - 1.0 / s1;
        let b = m1 / s1 - m2 / s2;
        let exact = 0.25 * ((a * m1 + b).powi(2) + a * a * s1);
        let got = modulated_fisher(&f, &q).unwrap();
        assert!((got - exact).abs() < 1e-3 * exact, "{got} vs {exact}");
        assert_abs_diff_eq!(modulated_fisher(&q, &q).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn linear_field_commutator_is_one_over_n() {
        let grid = Grid1D::new(-4.0, 4.0, 40).unwrap();
        let mu = GridDensity::gaussian(grid, 0.2, 0.8).unwrap();
        let a = GridDensity::gaussian(grid, -1.0, 0.3).unwrap();
        let b = GridDensity::gaussian(grid, 1.0, 0.6).unwrap();
        let v = GridField::from_fn(grid, |x| x).unwrap();
        for n in [2, 3] {
            let f = build_joint(JointInit::Mixture(&a, &b), &log(), 1.0, n).unwrap();
            let c = expected_commutator(&f, &v, &mu, &log()).unwrap();
            assert_abs_diff_eq!(c, 1.0 / n as f64, epsilon = 1e-12);
        }
        let f = build_joint(JointInit::Product(&a), &zero(), 1.0, 2).unwrap();
        assert_eq!(expected_commutator(&f, &v, &mu, &zero()).unwrap(), 0.0);
    }

    #[test]
    fn smooth_virial_pair_average_matches_quadrature() {
        let grid = Grid1D::new(0.0, 4.0, 16).unwrap();
        let kernel = KernelSpec::smooth(crate::kernels::SmoothKernel::Gaussian, 1).unwrap();
        let tables = ConvTables::new(&kernel, &grid).unwrap();
        let h = grid.h();
        for m in [0, 1, 5] {
            // midpoint rule on a fine sub-grid of the two cells
            let k = 400;
            let mut acc = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let x = (i as f64 + 0.5) * h / k as f64;
                    let y = m as f64 * h + (j as f64 + 0.5) * h / k as f64;
                    let r = (x - y).abs();
                    acc += r * kernel.radial_derivative(r);
                }
            }
            let expected = acc / (k * k) as f64;
            assert_abs_diff_eq!(virial_pair_average(&kernel, &tables, m), expected, epsilon = 1e-6);
        }
    }

    #[test]
    fn ou_dissipation_has_factor_four() {
        let grid = Grid1D::new(-5.0, 5.0, 240).unwrap();
        let beta = 1.0;
        let solver = LiouvilleSolver::new(&zero(), &x2(), beta, &grid, 2, StepMode::SemiImplicit).unwrap();
        let mu_beta = point_gaussian(grid, 0.0, 0.5);
        let nu = point_gaussian(grid, 0.3, 0.25);
        let f0 = build_joint(JointInit::Product(&nu), &zero(), beta, 2).unwrap();
        let run = solver.run(f0, mu_beta.clone(), Some(&mu_beta), &opts(2.5e-4, 0.5, 0.125)).unwrap();
        let report = dissipation_audit(&run.records, beta, 0.0);
        for row in &report.rows[1..report.rows.len() - 1] {
            let rec = run.records.iter().find(|r| r.t == row.t).unwrap();
            let sharp = -4.0 * rec.fisher / (beta * beta);
            assert!((row.de_dt - sharp).abs() < 1e-3 * sharp.abs(), "{row:?} vs {sharp}");
            assert!(row.margin >= 0.0);
        }
        assert_eq!(report.violations, 0);
    }

    #[test]
    fn ou_entropy_decays_faster_than_lsi_rate() {
        let grid = Grid1D::new(-5.0, 5.0, 100).unwrap();
        let beta = 1.0;
        let solver = LiouvilleSolver::new(&zero(), &x2(), beta, &grid, 2, StepMode::SemiImplicit).unwrap();
        let mu_beta = solver.mean_field().state(0.0, point_gaussian(grid, 0.0, 0.5)).mu;
        let nu = point_gaussian(grid, 0.8, 0.2);
        let f0 = build_joint(JointInit::Product(&nu), &zero(), beta, 2).unwrap();
        let run = solver.run(f0, mu_beta.clone(), Some(&mu_beta), &opts(1e-3, 2.0, 0.1)).unwrap();
        let report = gronwall_audit(&run.records, 2, beta, &TheoryConstants::default(), 1e-9).unwrap();
        assert_abs_diff_eq!(report.c_ls, 1.0, epsilon = 1e-6);
        assert!(report.fitted_rate >= 0.9 * report.plain_lsi_rate, "{report:?}");
        assert_eq!(report.violations, 0, "{report:?}");
        let chain = lsi_chain_audit(&run.records, 2, beta, 1e-9);
        assert_eq!(chain.violations, 0);
        assert_eq!(chain.checked, run.records.len());
    }

    #[test]
    fn equilibrium_start_is_quiet() {
        let grid = Grid1D::new(-5.0, 5.0, 64).unwrap();
        let beta = 1.0;
        let eq = solve_thermal_equilibrium(&log(), &x2(), beta, &grid, &EquilibriumOptions::default()).unwrap();
        let solver = LiouvilleSolver::new(&log(), &x2(), beta, &grid, 2, StepMode::SemiImplicit).unwrap();
        let f0 = build_joint(JointInit::ModulatedGibbs(&eq.mu_beta), &log(), beta, 2).unwrap();
        let run = solver.run(f0, eq.mu_beta.clone(), Some(&eq.mu_beta), &opts(0.01, 0.1, 0.05)).unwrap();
        for r in &run.records {
            assert!(r.h_q.abs() < 1e-8, "{r:?}");
            assert!(r.fisher < 1e-8, "{r:?}");
            assert!(r.de_dt.abs() < 1e-6, "{r:?}");
            assert!(r.commutator.abs() < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn gronwall_rhs_is_exact_for_constant_data() {
        let lambda = 4.0;
        let (e0, o, log_k, beta, n) = (0.7, 0.05, 0.3, 1.0, 2);
        let records: Vec<FreeEnergyRecord> = (0..=20)
            .map(|i| FreeEnergyRecord {
                t: 0.05 * i as f64,
                h_rel: 0.0,
                mean_f: 0.0,
                e_n: 0.0,
                e_script: e0,
                fisher: 0.0,
                commutator: 0.0,
                bound_rhs: f64::NAN,
                h_q: 0.0,
                log_k,
                o_n: o,
                sup_mu: 1.0,
                grad_u_sup: 0.0,
                kappa: 2.0,
                c_ls: 1.0,
                de_dt: 0.0,
            })
            .collect();
        let rhs = gronwall_rhs(&records, n, beta, 1.0, &TheoryConstants::default());
        let floor = o - log_k / (beta * n as f64);
        for (r, b) in records.iter().zip(rhs) {
            let exact = (-lambda * r.t).exp() * e0 + (1.0 - (-lambda * r.t).exp()) * floor;
            assert_abs_diff_eq!(b, exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn gronwall_audit_needs_a_certificate() {
        let rec = FreeEnergyRecord {
            t: 0.0,
            h_rel: 0.0,
            mean_f: 0.0,
            e_n: 0.0,
            e_script: 0.0,
            fisher: 0.0,
            commutator: 0.0,
            bound_rhs: f64::NAN,
            h_q: 0.0,
            log_k: 0.0,
            o_n: 0.0,
            sup_mu: 1.0,
            grad_u_sup: 0.0,
            kappa: -0.1,
            c_ls: f64::INFINITY,
            de_dt: 0.0,
        };
        assert!(matches!(
            gronwall_audit(&[rec], 2, 1.0, &TheoryConstants::default(), 0.0),
            Err(Error::InvalidLsi { .. })
        ));
    }

    #[test]
    fn decay_rate_of_exponential() {
        let t: Vec<f64> = (0..10).map(|i| i as f64 * 0.2).collect();
        let y: Vec<f64> = t.iter().map(|t| 3.0 * (-2.5 * t).exp()).collect();
        assert_abs_diff_eq!(decay_rate(&t, &y), 2.5, epsilon = 1e-12);
    }
}
