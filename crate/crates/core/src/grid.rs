//! Uniform one-dimensional grids, piecewise-constant densities and the
//! singular convolution `g * μ` with exact cell integrals.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::quad;

/// Cells below this value are treated as empty by log and entropy operations.
pub const DENSITY_FLOOR: f64 = 1e-14;

const MASS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    lo: f64,
    hi: f64,
    n_cells: usize,
}

impl Grid1D {
    pub fn new(lo: f64, hi: f64, n_cells: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidInput(format!("grid needs lo < hi, got [{lo}, {hi}]")));
        }
        if n_cells < 16 {
            return Err(Error::InvalidInput(format!("grid needs at least 16 cells, got {n_cells}")));
        }
        Ok(Self { lo, hi, n_cells })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    #[inline]
    pub fn h(&self) -> f64 {
        (self.hi - self.lo) / self.n_cells as f64
    }

    #[inline]
    pub fn center(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.h()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|k| self.center(k)).collect()
    }

    /// Left edge of cell `k` (`k = n_cells` gives `hi`).
    #[inline]
    pub fn face(&self, k: usize) -> f64 {
        self.lo + k as f64 * self.h()
    }

    /// Index of the cell containing `x`, or `None` outside `[lo, hi)`.
    pub fn cell_of(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x < self.hi) {
            return None;
        }
        Some((((x - self.lo) / self.h()) as usize).min(self.n_cells - 1))
    }

    /// Same window with twice as many cells.
    pub fn refined(&self) -> Self {
        Self { n_cells: 2 * self.n_cells, ..*self }
    }
}

/// A probability density stored as cell averages.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    grid: Grid1D,
    values: Vec<f64>,
}

impl GridDensity {
    /// Wraps cell averages that already integrate to one.
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        check_density_values(&grid, &values)?;
        let mass = grid.h() * values.iter().sum::<f64>();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidInput(format!("density has mass {mass}, expected 1")));
        }
        Ok(Self { grid, values })
    }

    /// Normalizes nonnegative cell values to unit mass.
    pub fn from_unnormalized(grid: Grid1D, mut values: Vec<f64>) -> Result<Self> {
        check_density_values(&grid, &values)?;
        let mass = grid.h() * values.iter().sum::<f64>();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::InvalidInput(format!("cannot normalize a density of mass {mass}")));
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Ok(Self { grid, values })
    }

    /// Cell averages of a nonnegative function (4-point Gauss rule per cell), normalized.
    pub fn from_fn<F: Fn(f64) -> f64>(grid: Grid1D, f: F) -> Result<Self> {
        let rule = quad::gauss_legendre(4);
        let h = grid.h();
        let values = (0..grid.n_cells())
            .map(|k| quad::integrate(&rule, grid.face(k), grid.face(k) + h, &f) / h)
            .collect();
        Self::from_unnormalized(grid, values)
    }

    /// Normal law restricted to the window, with exact cell masses.
    pub fn gaussian(grid: Grid1D, mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) {
            return Err(Error::InvalidInput(format!("gaussian variance must be positive, got {var}")));
        }
        let scale = (2.0 * var).sqrt();
        let h = grid.h();
        // erfc on the tails keeps the cell masses accurate far from the mean
        let mass = |l: f64, r: f64| {
            let (zl, zr) = ((l - mean) / scale, (r - mean) / scale);
            if zl >= 0.0 {
                0.5 * (libm::erfc(zl) - libm::erfc(zr))
            } else if zr <= 0.0 {
                0.5 * (libm::erfc(-zr) - libm::erfc(-zl))
            } else {
                0.5 * (libm::erf(zr) - libm::erf(zl))
            }
        };
        let values = (0..grid.n_cells())
            .map(|k| mass(grid.face(k), grid.face(k + 1)).max(0.0) / h)
            .collect();
        Self::from_unnormalized(grid, values)
    }

    /// Uniform density on `[a, b]`, cells partially covered get their covered fraction.
    pub fn uniform(grid: Grid1D, a: f64, b: f64) -> Result<Self> {
        let h = grid.h();
        let values = (0..grid.n_cells())
            .map(|k| {
                let l = grid.face(k).max(a);
                let r = grid.face(k + 1).min(b);
                (r - l).max(0.0) / h
            })
            .collect();
        Self::from_unnormalized(grid, values)
    }

    /// Used by steppers whose updates conserve mass by construction.
    pub(crate) fn from_raw(grid: Grid1D, values: Vec<f64>) -> Self {
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mass(&self) -> f64 {
        self.grid.h() * self.values.iter().sum::<f64>()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, &v| m.max(v))
    }

    pub fn mean(&self) -> f64 {
        let h = self.grid.h();
        (0..self.values.len()).map(|k| h * self.values[k] * self.grid.center(k)).sum()
    }

    /// Second moment about the mean of the piecewise-constant density.
    pub fn variance(&self) -> f64 {
        let h = self.grid.h();
        let m = self.mean();
        (0..self.values.len())
            .map(|k| {
                let c = self.grid.center(k) - m;
                h * self.values[k] * (c * c + h * h / 12.0)
            })
            .sum()
    }

    /// Density value at `x` (zero outside the window).
    pub fn value_at(&self, x: f64) -> f64 {
        self.grid.cell_of(x).map_or(0.0, |k| self.values[k])
    }

    /// Cumulative distribution function of the piecewise-constant density.
    pub fn cdf_table(&self) -> Vec<f64> {
        let h = self.grid.h();
        let mut out = Vec::with_capacity(self.values.len() + 1);
        let mut acc = 0.0;
        out.push(0.0);
        for &v in &self.values {
            acc += h * v;
            out.push(acc);
        }
        out
    }

    /// Indices of the first and last cell above the floor.
    pub fn support(&self) -> Option<(usize, usize)> {
        let first = self.values.iter().position(|&v| v > DENSITY_FLOOR)?;
        let last = self.values.iter().rposition(|&v| v > DENSITY_FLOOR)?;
        Some((first, last))
    }

    pub fn l1_distance(&self, other: &GridDensity) -> f64 {
        self.grid.h() * self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    pub fn sup_distance(&self, other: &GridDensity) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Writes `x,value` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "x,value")?;
        for (k, v) in self.values.iter().enumerate() {
            writeln!(w, "{},{}", self.grid.center(k), v)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`GridDensity::write_csv`]; the grid is recovered from the centers.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut xs = Vec::new();
        let mut vs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let parse = |s: Option<&str>| -> Result<f64> {
                s.and_then(|t| t.trim().parse().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("bad density row {}", i + 1)))
            };
            xs.push(parse(parts.next())?);
            vs.push(parse(parts.next())?);
        }
        if xs.len() < 2 {
            return Err(Error::InvalidInput("density csv has fewer than two rows".into()));
        }
        let n = xs.len();
        let h = (xs[n - 1] - xs[0]) / (n - 1) as f64;
        let grid = Grid1D::new(xs[0] - 0.5 * h, xs[n - 1] + 0.5 * h, n)?;
        Self::from_unnormalized(grid, vs)
    }

    /// Binary snapshot: magic, lo, hi, n_cells, values (little endian).
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&self.grid.lo.to_le_bytes())?;
        w.write_all(&self.grid.hi.to_le_bytes())?;
        w.write_all(&(self.grid.n_cells as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_snapshot(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = || Error::InvalidInput(format!("{} is not a density snapshot", path.display()));
        if bytes.len() < 28 || &bytes[..4] != SNAPSHOT_MAGIC {
            return Err(bad());
        }
        let word = |i: usize| -> [u8; 8] { bytes[i..i + 8].try_into().unwrap() };
        let lo = f64::from_le_bytes(word(4));
        let hi = f64::from_le_bytes(word(12));
        let n = u64::from_le_bytes(word(20)) as usize;
        if bytes.len() != 28 + 8 * n {
            return Err(bad());
        }
        let values = (0..n).map(|k| f64::from_le_bytes(word(28 + 8 * k))).collect();
        Self::new(Grid1D::new(lo, hi, n)?, values)
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"CLGD";

fn check_density_values(grid: &Grid1D, values: &[f64]) -> Result<()> {
    if values.len() != grid.n_cells() {
        return Err(Error::InvalidInput(format!(
            "{} values for a grid of {} cells",
            values.len(),
            grid.n_cells()
        )));
    }
    if let Some(k) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidInput(format!("density value {} in cell {k}", values[k])));
    }
    Ok(())
}

/// A finite scalar field on cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    grid: Grid1D,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::InvalidInput("field length does not match the grid".into()));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite field value in cell {k}")));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn<F: Fn(f64) -> f64>(grid: Grid1D, f: F) -> Result<Self> {
        Self::new(grid, grid.centers().into_iter().map(f).collect())
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Precomputed distance tables of a kernel on a grid.
///
/// `point[m]` integrates the kernel over a cell whose center is `m` cells away
/// from the evaluation point; `pair[m]` integrates it over a pair of cells `m`
/// apart. Both are exact for the log and Riesz families.
#[derive(Debug, Clone)]
pub struct ConvTables {
    kernel: KernelSpec,
    grid: Grid1D,
    point: Vec<f64>,
    pair: Vec<f64>,
}

impl ConvTables {
    pub fn new(kernel: &KernelSpec, grid: &Grid1D) -> Result<Self> {
        // validates d = 1 and local integrability
        kernel.cell_pair_integral(0, grid.h())?;
        let rule = quad::gauss_legendre(16);
        let h = grid.h();
        let n = grid.n_cells();
        let point = (0..n).map(|m| kernel.cell_point_integral(m, h)).collect();
        let pair = (0..n).map(|m| kernel.cell_pair_integral_unchecked(m, h, &rule)).collect();
        Ok(Self { kernel: *kernel, grid: *grid, point, pair })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    /// Kernel averaged over a pair of cells `m` apart.
    #[inline]
    pub fn pair_average(&self, m: usize) -> f64 {
        let h = self.grid.h();
        self.pair[m] / (h * h)
    }

    /// `(g * μ)` at the cell centers.
    pub fn point_conv(&self, values: &[f64]) -> Vec<f64> {
        toeplitz_apply(&self.point, values)
    }

    /// Cell averages of `g * μ`.
    pub fn cell_conv(&self, values: &[f64]) -> Vec<f64> {
        let inv_h = 1.0 / self.grid.h();
        let mut out = toeplitz_apply(&self.pair, values);
        out.iter_mut().for_each(|v| *v *= inv_h);
        out
    }

    /// `∬ g dμ dν` for piecewise-constant densities.
    pub fn double_integral(&self, a: &[f64], b: &[f64]) -> f64 {
        let conv = toeplitz_apply(&self.pair, b);
        a.iter().zip(&conv).map(|(x, y)| x * y).sum()
    }
}

fn toeplitz_apply(table: &[f64], values: &[f64]) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|k| {
            let mut acc = 0.0;
            for (j, &v) in values.iter().enumerate() {
                if v != 0.0 {
                    acc += table[k.abs_diff(j)] * v;
                }
            }
            acc
        })
        .collect()
}

/// `(g * μ)` at every cell center, exact for piecewise-constant `μ`.
pub fn convolve_kernel(spec: &KernelSpec, mu: &GridDensity) -> Result<GridField> {
    let tables = ConvTables::new(spec, mu.grid())?;
    GridField::new(*mu.grid(), tables.point_conv(mu.values()))
}

/// Cell averages of `g * μ`, the discrete potential used by the solvers.
pub fn convolve_kernel_cells(spec: &KernelSpec, mu: &GridDensity) -> Result<GridField> {
    let tables = ConvTables::new(spec, mu.grid())?;
    GridField::new(*mu.grid(), tables.cell_conv(mu.values()))
}

/// `∬ g(x, y) dμ(x) dν(y)` with exact cell-pair integrals.
pub fn double_integral(spec: &KernelSpec, mu: &GridDensity, nu: &GridDensity) -> Result<f64> {
    if mu.grid() != nu.grid() {
        return Err(Error::InvalidInput("densities live on different grids".into()));
    }
    let tables = ConvTables::new(spec, mu.grid())?;
    Ok(tables.double_integral(mu.values(), nu.values()))
}

/// `(g * μ)(x)` at an arbitrary point.
pub fn conv_at(spec: &KernelSpec, mu: &GridDensity, x: f64) -> f64 {
    // Summation by parts over the faces: only jumps of μ contribute.
    let grid = mu.grid();
    let v = mu.values();
    let n = v.len();
    let mut acc = 0.0;
    for f in 0..=n {
        let right = if f < n { v[f] } else { 0.0 };
        let left = if f > 0 { v[f - 1] } else { 0.0 };
        let jump = right - left;
        if jump != 0.0 {
            acc += jump * spec.antiderivative(x - grid.face(f));
        }
    }
    acc
}

/// `(g * μ)'(x)` at a point that is not a face of the grid.
pub fn conv_grad_at(spec: &KernelSpec, mu: &GridDensity, x: f64) -> f64 {
    let grid = mu.grid();
    let v = mu.values();
    let n = v.len();
    let mut acc = 0.0;
    for f in 0..=n {
        let right = if f < n { v[f] } else { 0.0 };
        let left = if f > 0 { v[f - 1] } else { 0.0 };
        let jump = right - left;
        if jump != 0.0 {
            acc += jump * spec.radial((x - grid.face(f)).abs());
        }
    }
    acc
}

/// Central-difference derivative of a field (one-sided at the ends).
pub fn grad_field(field: &GridField) -> GridField {
    let v = field.values();
    GridField { grid: *field.grid(), values: central_diff(v, field.grid().h()) }
}

pub(crate) fn central_diff(v: &[f64], h: f64) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|k| match k {
            0 => (v[1] - v[0]) / h,
            k if k == n - 1 => (v[n - 1] - v[n - 2]) / h,
            k => (v[k + 1] - v[k - 1]) / (2.0 * h),
        })
        .collect()
}

/// `log μ`, with cells below [`DENSITY_FLOOR`] clamped to the floor.
pub fn log_density(mu: &GridDensity) -> GridField {
    GridField {
        grid: *mu.grid(),
        values: mu.values().iter().map(|&v| v.max(DENSITY_FLOOR).ln()).collect(),
    }
}

/// `∫ μ log μ`, skipping cells below the floor.
pub fn entropy(mu: &GridDensity) -> f64 {
    let h = mu.grid().h();
    mu.values().iter().filter(|&&v| v > DENSITY_FLOOR).map(|&v| h * v * v.ln()).sum()
}

/// `max |second central difference| / h²` over interior cells.
pub fn c2_seminorm(field: &GridField) -> f64 {
    let n = field.grid().n_cells();
    if n < 64 {
        log::warn!("C2 seminorm on a coarse grid of {n} cells");
    }
    c2_seminorm_window(field.values(), field.grid().h(), 0, n - 1)
}

/// Same as [`c2_seminorm`] restricted to cells `first..=last`.
pub fn c2_seminorm_window(values: &[f64], h: f64, first: usize, last: usize) -> f64 {
    let mut best = 0.0_f64;
    for k in (first + 1)..last {
        let d2 = (values[k + 1] - 2.0 * values[k] + values[k - 1]) / (h * h);
        best = best.max(d2.abs());
    }
    best
}

/// Discrete `(-Δ)^{α/2}` of a compactly supported field, `0 < α ≤ 2`.
///
/// Uses the symmetrized Grünwald–Letnikov construction
/// `(D₊^α + D₋^α) / (2 cos(πα/2))` with zero extension outside the window.
pub fn fractional_laplacian(values: &[f64], h: f64, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 2.0) || (alpha - 1.0).abs() < 1e-12 {
        return Err(Error::InvalidInput(format!(
            "fractional order must lie in (0, 2] and differ from 1, got {alpha}"
        )));
    }
    let n = values.len();
    // w_j = (-1)^j binom(alpha, j), shifted by one cell for stability
    let mut w = vec![0.0; n + 2];
    w[0] = 1.0;
    for j in 1..n + 2 {
        w[j] = w[j - 1] * (1.0 - (alpha + 1.0) / j as f64);
    }
    let scale = h.powf(-alpha) / (2.0 * (0.5 * std::f64::consts::PI * alpha).cos());
    let at = |i: isize| if i >= 0 && (i as usize) < n { values[i as usize] } else { 0.0 };
    Ok((0..n as isize)
        .map(|k| {
            let mut left = 0.0;
            let mut right = 0.0;
            for j in 0..(n + 2) as isize {
                left += w[j as usize] * at(k - j + 1);
                right += w[j as usize] * at(k + j - 1);
            }
            (left + right) * scale
        })
        .collect())
}
