//! Scalar functionals of configurations and densities: the modulated energy,
//! partition-function estimates and bounds, exponential moments, commutators,
//! the Riesz error terms and distances between marginals.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{self, ConvTables, Grid1D, GridDensity, GridField};
use crate::kernels::{KernelFamily, KernelSpec, SmoothKernel};
use crate::particles::{DensitySampler, EnsembleSnapshot, ParticleConfig};

/// Largest `N` accepted by the importance-sampling partition estimate.
pub const MAX_PARTITION_N: usize = 16;
/// Smallest effective sample size an importance estimate may rest on.
pub const MIN_ESS: f64 = 30.0;
/// Bins per axis of the marginal histograms.
pub const HIST_BINS: usize = 64;
/// Additive smoothing per histogram bin in the plug-in KL divergence.
pub const KL_SMOOTHING: f64 = 0.5;

/// The three parts of `F_N(X_N, μ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModulatedEnergyBreakdown {
    /// `(1/2N²) Σ_{i≠j} g(x_i, x_j)`
    pub pair_sum: f64,
    /// `(1/N) Σ_i (g * μ)(x_i)`
    pub cross: f64,
    /// `½ ∬ g dμ dμ`
    pub background: f64,
    pub total: f64,
}

impl ModulatedEnergyBreakdown {
    fn new(pair_sum: f64, cross: f64, background: f64) -> Self {
        Self { pair_sum, cross, background, total: pair_sum - cross + background }
    }
}

/// Evaluates `F_N(·, μ)` against a fixed one-dimensional background.
#[derive(Debug, Clone)]
pub struct ModulatedEnergy {
    kernel: KernelSpec,
    mu: GridDensity,
    background: f64,
}

impl ModulatedEnergy {
    pub fn new(kernel: &KernelSpec, mu: &GridDensity) -> Result<Self> {
        let tables = ConvTables::new(kernel, mu.grid())?;
        let background = 0.5 * tables.double_integral(mu.values(), mu.values());
        Ok(Self { kernel: *kernel, mu: mu.clone(), background })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn mu(&self) -> &GridDensity {
        &self.mu
    }

    pub fn background(&self) -> f64 {
        self.background
    }

    pub fn evaluate(&self, cfg: &ParticleConfig) -> Result<ModulatedEnergyBreakdown> {
        if cfg.d() != 1 {
            return Err(Error::InvalidInput("grid backgrounds are one-dimensional".into()));
        }
        if self.kernel.is_singular() {
            if let Some((i, j)) = cfg.coincident_pair() {
                return Err(Error::CoincidentPoints { i, j });
            }
        }
        Ok(self.breakdown_unchecked(cfg))
    }

    fn breakdown_unchecked(&self, cfg: &ParticleConfig) -> ModulatedEnergyBreakdown {
        let x = cfg.positions();
        let n = x.len() as f64;
        let mut pair = 0.0;
        for i in 0..x.len() {
            for j in (i + 1)..x.len() {
                pair += self.kernel.radial((x[i] - x[j]).abs());
            }
        }
        let cross: f64 = x.iter().map(|&xi| grid::conv_at(&self.kernel, &self.mu, xi)).sum();
        ModulatedEnergyBreakdown::new(pair / (n * n), cross / n, self.background)
    }

    /// `-η N F_N`, which is `-∞` at a coincidence of a repulsive singular kernel.
    fn log_weight(&self, cfg: &ParticleConfig, eta: f64) -> f64 {
        let f = self.breakdown_unchecked(cfg).total;
        if f.is_nan() {
            return f64::NEG_INFINITY;
        }
        -eta * cfg.n() as f64 * f
    }
}

/// `F_N(X_N, μ)` with the diagonal removed.
pub fn modulated_energy(cfg: &ParticleConfig, mu: &GridDensity, kernel: &KernelSpec) -> Result<ModulatedEnergyBreakdown> {
    ModulatedEnergy::new(kernel, mu)?.evaluate(cfg)
}

/// The full double integral against `(emp - μ)⊗²`, diagonal included.
///
/// Only defined for kernels that are finite on the diagonal.
pub fn unrenormalized_energy(cfg: &ParticleConfig, mu: &GridDensity, kernel: &KernelSpec) -> Result<f64> {
    if kernel.is_singular() {
        return Err(Error::UnsupportedKernel(
            "the unrenormalized energy needs a kernel that is finite on the diagonal".into(),
        ));
    }
    let f = modulated_energy(cfg, mu, kernel)?;
    Ok(f.total + kernel.radial(0.0) / (2.0 * cfg.n() as f64))
}

/// Constants that the theory leaves unspecified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryConstants {
    /// Constant of the Riesz lower bound and its error terms.
    pub c_riesz: f64,
    /// Relative-entropy weight in the commutator estimate.
    pub c_re: f64,
    /// Modulated-energy weight in the commutator estimate.
    pub c_me: f64,
    /// How much relative entropy may offset a negative modulated energy.
    pub c_beta_assm: f64,
}

impl Default for TheoryConstants {
    fn default() -> Self {
        Self { c_riesz: 1.0, c_re: 1.0, c_me: 1.0, c_beta_assm: 0.0 }
    }
}

impl TheoryConstants {
    pub fn validate(&self, beta: f64) -> Result<()> {
        if !(self.c_riesz > 0.0 && self.c_riesz.is_finite()) {
            return Err(Error::InvalidInput(format!("c_riesz must be positive, got {}", self.c_riesz)));
        }
        if !(self.c_re >= 0.0 && self.c_me >= 0.0) {
            return Err(Error::InvalidInput("c_re and c_me must be nonnegative".into()));
        }
        if !(self.c_beta_assm >= 0.0 && self.c_beta_assm * beta < 1.0) {
            return Err(Error::InvalidInput(format!(
                "c_beta_assm must lie in [0, 1/β) = [0, {}), got {}",
                1.0 / beta,
                self.c_beta_assm
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    RieszSupercoulomb,
    RieszSubcoulomb,
    Log,
}

/// The additive error `o_N` for a given `N` and `‖μ‖_∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorTerms {
    pub o_n: f64,
    pub mode: ErrorMode,
}

struct BoundParts {
    s: f64,
    d: f64,
    sub: bool,
    /// Part of the bound magnitude that does not scale with the constant.
    fixed: f64,
    /// Part proportional to the constant.
    scaled: f64,
}

fn bound_parts(n: usize, sup_mu: f64, kernel: &KernelSpec) -> Result<BoundParts> {
    let s = kernel
        .riesz_exponent()
        .ok_or_else(|| Error::UnsupportedKernel("the Riesz bounds need a log or Riesz kernel".into()))?;
    if n == 0 || !(sup_mu > 0.0 && sup_mu.is_finite()) {
        return Err(Error::InvalidInput(format!("need N ≥ 1 and 0 < ‖μ‖∞ < ∞, got N = {n}, ‖μ‖∞ = {sup_mu}")));
    }
    let d = kernel.dim() as f64;
    let nf = n as f64;
    let log_term = if s == 0.0 { (nf * sup_mu).ln() } else { 0.0 };
    let sub = s < d - 2.0;
    let parts = if sub {
        let gamma = 2.0 * (d - s) / (2.0 * (d - s) + s * (d + 2.0));
        BoundParts { s, d, sub, fixed: 0.0, scaled: log_term / nf + sup_mu.powf(s / d) * nf.powf(-gamma) }
    } else {
        BoundParts { s, d, sub, fixed: log_term / (2.0 * nf * d), scaled: sup_mu.powf(s / d) * nf.powf(s / d - 1.0) }
    };
    Ok(parts)
}

/// Configuration-independent lower bound on `F_N(·, μ)` for log and Riesz kernels.
pub fn riesz_lower_bound(n: usize, sup_mu: f64, kernel: &KernelSpec, constants: &TheoryConstants) -> Result<f64> {
    let p = bound_parts(n, sup_mu, kernel)?;
    Ok(-(p.fixed + constants.c_riesz * p.scaled))
}

/// The additive error `o_N`.
///
/// The sub-Coulomb branch (`s < d - 2`, so `d = 3` here) needs the sup norm of
/// `(-Δ)^{(s+1-d)/2} μ`, which has to be supplied by the caller. Values are
/// clamped at zero, which only matters for the log kernel when `N ‖μ‖∞` is tiny.
pub fn error_terms(
    n: usize,
    sup_mu: f64,
    kernel: &KernelSpec,
    constants: &TheoryConstants,
    fractional_norm: Option<f64>,
) -> Result<ErrorTerms> {
    let p = bound_parts(n, sup_mu, kernel)?;
    let mode = if p.s == 0.0 {
        ErrorMode::Log
    } else if p.sub {
        ErrorMode::RieszSubcoulomb
    } else {
        ErrorMode::RieszSupercoulomb
    };
    let o_n = if p.sub {
        let frac = fractional_norm.ok_or_else(|| {
            Error::InvalidInput("the sub-Coulomb error term needs the fractional norm of μ".into())
        })?;
        let (s, d, nf) = (p.s, p.d, n as f64);
        let a = 2.0 * (d - s) / (d + 2.0);
        let denom = (s + a) * (1.0 + s);
        frac * nf.powf(-(s + 1.0 + a) / denom) + sup_mu.powf((2.0 + s) / (d + 2.0)) * nf.powf(-a / denom)
    } else {
        p.fixed + constants.c_riesz * p.scaled
    };
    Ok(ErrorTerms { o_n: o_n.max(0.0), mode })
}

/// Time derivative of a sampled series by central differences (one-sided at the ends).
pub fn series_rate(times: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    let n = times.len();
    if n != values.len() || n < 2 {
        return Err(Error::InvalidInput("need at least two matching samples".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("sample times must increase".into()));
    }
    Ok((0..n)
        .map(|i| {
            let (a, b) = match i {
                0 => (0, 1),
                i if i == n - 1 => (n - 2, n - 1),
                i => (i - 1, i + 1),
            };
            (values[b] - values[a]) / (times[b] - times[a])
        })
        .collect())
}

/// Upper bound on `log K_{N,β}(μ)`.
///
/// For log and Riesz kernels this is `β N` times the magnitude of
/// [`riesz_lower_bound`]; for nonnegative kernels that are finite on the
/// diagonal it is `β g(0) / 2`.
pub fn partition_upper_bound(
    n: usize,
    sup_mu: f64,
    kernel: &KernelSpec,
    beta: f64,
    constants: &TheoryConstants,
) -> Result<f64> {
    match kernel.family() {
        KernelFamily::Log | KernelFamily::Riesz { .. } => {
            Ok(-beta * n as f64 * riesz_lower_bound(n, sup_mu, kernel, constants)?)
        }
        KernelFamily::Smooth(SmoothKernel::Gaussian | SmoothKernel::Zero) => Ok(0.5 * beta * kernel.radial(0.0)),
        KernelFamily::Smooth(SmoothKernel::Constant(c)) if c >= 0.0 => Ok(0.5 * beta * c),
        KernelFamily::Smooth(_) => Err(Error::UnsupportedKernel("no partition upper bound for a sign-changing kernel".into())),
    }
}

/// Jensen lower bound `(β/2) ∬ g dμ dμ` on `log K_{N,β}(μ)`.
pub fn jensen_lower_bound(mu: &GridDensity, kernel: &KernelSpec, beta: f64) -> Result<f64> {
    Ok(0.5 * beta * grid::double_integral(kernel, mu, mu)?)
}

/// Log of a sample mean of weights, with its jackknife error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogMeanEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub ess: f64,
    pub samples: usize,
}

/// `log((1/M) Σ e^{w_i})` from log-weights, with a leave-one-out jackknife error.
pub fn log_mean_exp(log_weights: &[f64]) -> Result<LogMeanEstimate> {
    let m = log_weights.len();
    if m < 2 {
        return Err(Error::InsufficientSamples { got: m, needed: 2 });
    }
    if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(Error::Overflow("non-finite importance weight".into()));
    }
    let shift = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return Err(Error::UnreliableEstimate { ess: 0.0 });
    }
    let w: Vec<f64> = log_weights.iter().map(|&lw| (lw - shift).exp()).collect();
    let sum: f64 = w.iter().sum();
    let sum_sq: f64 = w.iter().map(|x| x * x).sum();
    let ess = sum * sum / sum_sq;
    if ess < MIN_ESS {
        return Err(Error::UnreliableEstimate { ess });
    }
    let mf = m as f64;
    let estimate = shift + (sum / mf).ln();
    let loo: Vec<f64> = w.iter().map(|&wi| shift + ((sum - wi).max(0.0) / (mf - 1.0)).ln()).collect();
    let mean = loo.iter().sum::<f64>() / mf;
    let var = (mf - 1.0) / mf * loo.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>();
    Ok(LogMeanEstimate { estimate, std_error: var.sqrt(), ess, samples: m })
}

fn iid_configs<R: Rng + ?Sized>(mu: &GridDensity, n: usize, m: usize, rng: &mut R) -> Vec<ParticleConfig> {
    let sampler = DensitySampler::new(mu);
    (0..m)
        .map(|_| {
            let x = (0..n).map(|_| sampler.sample(rng)).collect();
            ParticleConfig::line(x).expect("sampled positions are finite")
        })
        .collect()
}

/// Importance-sampling estimate of `log K_{N,β}(μ)` from `μ^{⊗N}` draws.
pub fn log_partition_estimate<R: Rng + ?Sized>(
    mu: &GridDensity,
    kernel: &KernelSpec,
    beta: f64,
    n: usize,
    samples: usize,
    rng: &mut R,
) -> Result<LogMeanEstimate> {
    if n == 0 || n > MAX_PARTITION_N {
        return Err(Error::InvalidInput(format!("partition estimates need 1 ≤ N ≤ {MAX_PARTITION_N}, got {n}")));
    }
    let eval = ModulatedEnergy::new(kernel, mu)?;
    let configs = iid_configs(mu, n, samples, rng);
    let lw: Vec<f64> = configs.par_iter().map(|c| eval.log_weight(c, beta)).collect();
    log_mean_exp(&lw)
}

/// Both sides of `log E_Q[e^{(β/2) N F_N}] = log K_{N,β/2} - log K_{N,β}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentialMoment {
    pub lhs: f64,
    pub lhs_error: f64,
    pub rhs: f64,
    pub rhs_error: f64,
}

impl ExponentialMoment {
    pub fn discrepancy(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }

    pub fn combined_error(&self) -> f64 {
        self.lhs_error.hypot(self.rhs_error)
    }
}

/// Compares the exponential moment under `Q_{N,β}(μ)` samples with the ratio of
/// two independently estimated partition functions.
pub fn exponential_moment_check<R: Rng + ?Sized>(
    mu: &GridDensity,
    kernel: &KernelSpec,
    beta: f64,
    q_samples: &[ParticleConfig],
    is_samples: usize,
    rng: &mut R,
) -> Result<ExponentialMoment> {
    let n = q_samples.first().ok_or(Error::InsufficientSamples { got: 0, needed: 2 })?.n();
    if q_samples.iter().any(|c| c.n() != n) {
        return Err(Error::InvalidInput("samples with different particle numbers".into()));
    }
    let eval = ModulatedEnergy::new(kernel, mu)?;
    let lw: Vec<f64> = q_samples.par_iter().map(|c| eval.log_weight(c, -0.5 * beta)).collect();
    let lhs = log_mean_exp(&lw)?;
    let half = log_partition_estimate(mu, kernel, 0.5 * beta, n, is_samples, rng)?;
    let full = log_partition_estimate(mu, kernel, beta, n, is_samples, rng)?;
    Ok(ExponentialMoment {
        lhs: lhs.estimate,
        lhs_error: lhs.std_error,
        rhs: half.estimate - full.estimate,
        rhs_error: half.std_error.hypot(full.std_error),
    })
}

/// Piecewise-linear interpolant of a field through the cell centers,
/// extended linearly past the first and last center.
pub(crate) struct PiecewiseLinear<'a> {
    grid: Grid1D,
    v: &'a [f64],
}

impl<'a> PiecewiseLinear<'a> {
    pub(crate) fn new(field: &'a GridField) -> Self {
        Self { grid: *field.grid(), v: field.values() }
    }

    fn segment(&self, x: f64) -> usize {
        let s = ((x - self.grid.lo()) / self.grid.h() - 0.5).floor();
        (s.max(0.0) as usize).min(self.v.len() - 2)
    }

    fn slope(&self, s: usize) -> f64 {
        (self.v[s + 1] - self.v[s]) / self.grid.h()
    }

    fn on_segment(&self, s: usize, x: f64) -> f64 {
        self.v[s] + self.slope(s) * (x - self.grid.center(s))
    }

    fn eval(&self, x: f64) -> f64 {
        self.on_segment(self.segment(x), x)
    }

    /// Half cells `[a, b]` on which both `μ` and the interpolant are simple,
    /// with the owning cell and the linear segment.
    fn pieces(&self) -> impl Iterator<Item = (f64, f64, usize, usize)> + '_ {
        let n = self.v.len();
        (0..n).flat_map(move |k| {
            let c = self.grid.center(k);
            [
                (self.grid.face(k), c, k, k.saturating_sub(1)),
                (c, self.grid.face(k + 1), k, k.min(n - 2)),
            ]
        })
    }
}

/// `∫ (v(x) - v(y)) g'(x - y) μ(y) dy`, in closed form.
pub(crate) fn commutator_inner(pl: &PiecewiseLinear, kernel: &KernelSpec, mu: &[f64], x: f64) -> f64 {
    let r = |t: f64| kernel.virial_antiderivative(t);
    let vx = pl.eval(x);
    let mut acc = 0.0;
    for (a, b, k, s) in pl.pieces() {
        if mu[k] == 0.0 {
            continue;
        }
        // v(x) - v(y) = δ + a_s (x - y) for y on this piece
        let virial = if x <= a {
            r(b - x) - r(a - x)
        } else if x >= b {
            r(x - a) - r(x - b)
        } else {
            r(x - a) + r(b - x)
        };
        let mut piece = pl.slope(s) * virial;
        if x < a || x > b {
            let delta = vx - pl.on_segment(s, x);
            if delta != 0.0 {
                piece += delta * (kernel.radial((x - a).abs()) - kernel.radial((x - b).abs()));
            }
        }
        acc += mu[k] * piece;
    }
    acc
}

/// `∬ (v(x) - v(y)) g'(x - y) dμ dμ = 2 ∫ v μ (g' * μ)`, in closed form.
pub(crate) fn commutator_background(pl: &PiecewiseLinear, kernel: &KernelSpec, mu: &[f64]) -> f64 {
    let grid = pl.grid;
    let n = mu.len();
    let jumps: Vec<(f64, f64)> = (0..=n)
        .filter_map(|f| {
            let right = if f < n { mu[f] } else { 0.0 };
            let left = if f > 0 { mu[f - 1] } else { 0.0 };
            (right != left).then(|| (grid.face(f), right - left))
        })
        .collect();
    let mut acc = 0.0;
    for (a, b, k, s) in pl.pieces() {
        if mu[k] == 0.0 {
            continue;
        }
        let slope = pl.slope(s);
        let mut piece = 0.0;
        for &(f, jump) in &jumps {
            let value = kernel.antiderivative(b - f) - kernel.antiderivative(a - f);
            let moment = kernel.radial_moment(b - f) - kernel.radial_moment(a - f);
            piece += jump * (pl.on_segment(s, f) * value + slope * moment);
        }
        acc += mu[k] * piece;
    }
    2.0 * acc
}

/// `∬_{x≠y} (v(x) - v(y)) g'(x - y) d(emp - μ)(x) d(emp - μ)(y)` in d = 1.
///
/// `v` is read as the piecewise-linear interpolant of its center values. All
/// integrals against `μ` are evaluated in closed form.
pub fn commutator_functional(
    v: &GridField,
    cfg: &ParticleConfig,
    mu: &GridDensity,
    kernel: &KernelSpec,
) -> Result<f64> {
    if cfg.d() != 1 || kernel.dim() != 1 {
        return Err(Error::InvalidInput("the commutator is implemented in one dimension".into()));
    }
    if v.grid() != mu.grid() {
        return Err(Error::InvalidInput("v and μ live on different grids".into()));
    }
    if kernel.is_singular() {
        if let Some((i, j)) = cfg.coincident_pair() {
            return Err(Error::CoincidentPoints { i, j });
        }
    }
    let pl = PiecewiseLinear::new(v);
    let x = cfg.positions();
    let n = x.len() as f64;
    let vx: Vec<f64> = x.iter().map(|&xi| pl.eval(xi)).collect();
    let mut pair = 0.0;
    for i in 0..x.len() {
        for j in (i + 1)..x.len() {
            pair += (vx[i] - vx[j]) * kernel.grad_1d(x[i] - x[j]);
        }
    }
    let cross: f64 = x.iter().map(|&xi| commutator_inner(&pl, kernel, mu.values(), xi)).sum();
    let background = commutator_background(&pl, kernel, mu.values());
    Ok(2.0 * pair / (n * n) - 2.0 * cross / n + background)
}

/// Outcome of fitting an unspecified constant to samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    /// Smallest value consistent with every usable sample.
    pub value: f64,
    pub used: usize,
    /// Samples no finite constant can accommodate.
    pub unfixable: usize,
}

/// Smallest `c_riesz` for which the Riesz lower bound holds on all `f_values`.
pub fn calibrate_c_riesz(f_values: &[f64], n: usize, sup_mu: f64, kernel: &KernelSpec) -> Result<Calibration> {
    let p = bound_parts(n, sup_mu, kernel)?;
    if p.scaled <= 0.0 {
        return Err(Error::Domain("the bound does not grow with the constant for these N and ‖μ‖∞".into()));
    }
    let needed = f_values.iter().map(|&f| (-f - p.fixed) / p.scaled).fold(0.0, f64::max);
    Ok(Calibration { value: needed.max(f64::EPSILON), used: f_values.len(), unfixable: 0 })
}

/// One observation for the commutator estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommutatorSample {
    pub commutator: f64,
    pub grad_v_sup: f64,
    pub modulated_energy: f64,
    pub o_n: f64,
}

/// Smallest `c_me` with `|comm| ≤ sup|∇v| c_me (F_N + o_N)` on every sample.
pub fn calibrate_c_me(samples: &[CommutatorSample]) -> Calibration {
    let mut value = 0.0_f64;
    let mut used = 0;
    let mut unfixable = 0;
    for s in samples {
        let scale = s.grad_v_sup * (s.modulated_energy + s.o_n);
        if scale > 0.0 {
            value = value.max(s.commutator.abs() / scale);
            used += 1;
        } else if s.commutator != 0.0 {
            unfixable += 1;
        }
    }
    Calibration { value, used, unfixable }
}

/// `E[F_N] + c_β H + o_N`, nonnegative when the entropy-offset assumption holds.
///
/// `h_proxy` stands in for the normalized relative entropy, which samples
/// cannot measure.
pub fn assumption_ii_margin(mean_f: f64, h_proxy: f64, o_n: f64, constants: &TheoryConstants) -> f64 {
    mean_f + constants.c_beta_assm * h_proxy + o_n
}

/// Distances between a pooled empirical k-marginal and `reference^{⊗k}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginalDistances {
    /// Only for `k = 1`.
    pub w2: Option<f64>,
    pub tv: f64,
    pub kl: f64,
    pub samples: usize,
}

/// Pools every ordered k-tuple of distinct particles into a flat list.
pub fn pooled_marginal(snapshots: &[EnsembleSnapshot], k: usize) -> Result<Vec<f64>> {
    if !(1..=2).contains(&k) {
        return Err(Error::InvalidInput(format!("marginal order must be 1 or 2, got {k}")));
    }
    let mut out = Vec::new();
    for cfg in snapshots.iter().flat_map(|s| &s.configs) {
        if cfg.d() != 1 {
            return Err(Error::InvalidInput("marginals are computed for d = 1".into()));
        }
        let x = cfg.positions();
        if k == 1 {
            out.extend_from_slice(x);
        } else {
            for i in 0..x.len() {
                for j in 0..x.len() {
                    if i != j {
                        out.push(x[i]);
                        out.push(x[j]);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn marginal_distances(snapshots: &[EnsembleSnapshot], reference: &GridDensity, k: usize) -> Result<MarginalDistances> {
    let tuples = pooled_marginal(snapshots, k)?;
    let samples = tuples.len() / k;
    let needed = 100 * HIST_BINS.pow(k as u32);
    if samples < needed {
        return Err(Error::InsufficientSamples { got: samples, needed });
    }
    let (tv, kl) = histogram_distances(&tuples, reference, k)?;
    let w2 = (k == 1).then(|| w2_to_density(&tuples, reference));
    Ok(MarginalDistances { w2, tv, kl, samples })
}

/// Exact `W₂` between an empirical measure and a piecewise-constant density.
pub fn w2_to_density(samples: &[f64], reference: &GridDensity) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let m = xs.len();
    let grid = reference.grid();
    let mut cdf = reference.cdf_table();
    let total = *cdf.last().unwrap();
    cdf.iter_mut().for_each(|c| *c /= total);
    let mu = reference.values();
    let h = grid.h();
    // quantile on cell k: Q(u) = face(k) + h (u - F_k) / (F_{k+1} - F_k)
    let mut acc = 0.0;
    let mut k = 0;
    for (i, &x) in xs.iter().enumerate() {
        let mut u0 = i as f64 / m as f64;
        let u_end = (i + 1) as f64 / m as f64;
        while u0 < u_end && k < mu.len() {
            let width = cdf[k + 1] - cdf[k];
            if width <= 0.0 || u0 >= cdf[k + 1] {
                k += 1;
                continue;
            }
            let u1 = u_end.min(cdf[k + 1]);
            let q = |u: f64| grid.face(k) + h * (u - cdf[k]) / width;
            let (a, b) = (x - q(u0), x - q(u1));
            acc += (u1 - u0) * (a * a + a * b + b * b) / 3.0;
            u0 = u1;
        }
    }
    acc.sqrt()
}

/// Exact `W₂` between two empirical measures on the line.
pub fn w2_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len(), xb.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < na && j < nb {
        let ua = (i + 1) as f64 / na as f64;
        let ub = (j + 1) as f64 / nb as f64;
        let next = ua.min(ub);
        let d = xa[i] - xb[j];
        acc += (next - u) * d * d;
        u = next;
        if ua <= next {
            i += 1;
        }
        if ub <= next {
            j += 1;
        }
    }
    acc.sqrt()
}

fn bin_masses(reference: &GridDensity) -> Vec<f64> {
    let grid = reference.grid();
    let cdf = reference.cdf_table();
    let total = *cdf.last().unwrap();
    let mu = reference.values();
    let cdf_at = |x: f64| {
        let t = ((x - grid.lo()) / grid.h()).clamp(0.0, mu.len() as f64);
        let k = (t.floor() as usize).min(mu.len() - 1);
        cdf[k] + (t - k as f64) * grid.h() * mu[k]
    };
    let width = (grid.hi() - grid.lo()) / HIST_BINS as f64;
    (0..HIST_BINS)
        .map(|b| {
            let lo = grid.lo() + b as f64 * width;
            (cdf_at(lo + width) - cdf_at(lo)) / total
        })
        .collect()
}

fn bin_of(grid: &Grid1D, x: f64) -> usize {
    let width = (grid.hi() - grid.lo()) / HIST_BINS as f64;
    (((x - grid.lo()) / width).floor().max(0.0) as usize).min(HIST_BINS - 1)
}

/// Histogram TV and smoothed plug-in KL(empirical ‖ reference^{⊗k}).
///
/// Bins split the reference window into 64 per axis; samples outside the window
/// are counted in the edge bins.
pub fn histogram_distances(tuples: &[f64], reference: &GridDensity, k: usize) -> Result<(f64, f64)> {
    if !(1..=2).contains(&k) || !tuples.len().is_multiple_of(k) || tuples.is_empty() {
        return Err(Error::InvalidInput("need a nonempty list of 1- or 2-tuples".into()));
    }
    let grid = reference.grid();
    let single = bin_masses(reference);
    let bins = HIST_BINS.pow(k as u32);
    let reference_mass: Vec<f64> = if k == 1 {
        single
    } else {
        (0..bins).map(|b| single[b / HIST_BINS] * single[b % HIST_BINS]).collect()
    };
    let mut counts = vec![0usize; bins];
    for t in tuples.chunks(k) {
        let b = t.iter().fold(0, |acc, &x| acc * HIST_BINS + bin_of(grid, x));
        counts[b] += 1;
    }
    let m = (tuples.len() / k) as f64;
    let denom = m + KL_SMOOTHING * bins as f64;
    let mut tv = 0.0;
    let mut kl = 0.0;
    for (&c, &q) in counts.iter().zip(&reference_mass) {
        tv += (c as f64 / m - q).abs();
        let p_s = (c as f64 + KL_SMOOTHING) / denom;
        let q_s = (m * q + KL_SMOOTHING) / denom;
        kl += p_s * (p_s / q_s).ln();
    }
    Ok((0.5 * tv, kl.max(0.0)))
}

/// Expected histogram TV between `samples` iid draws and their own law.
pub fn tv_noise_floor(reference: &GridDensity, k: usize, samples: usize) -> f64 {
    let single = bin_masses(reference);
    let masses: Vec<f64> = if k == 1 {
        single
    } else {
        single.iter().flat_map(|a| single.iter().map(move |b| a * b)).collect()
    };
    let m = samples as f64;
    0.5 * masses.iter().map(|&q| (2.0 * q * (1.0 - q) / (std::f64::consts::PI * m)).sqrt()).sum::<f64>()
}

/// Histogram TV between two samples on `HIST_BINS` equal bins of `window`.
///
/// Out-of-window samples land in the edge bins.
pub fn two_sample_tv(a: &[f64], b: &[f64], window: (f64, f64)) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientSamples { got: a.len().min(b.len()), needed: 1 });
    }
    let grid = Grid1D::new(window.0, window.1, HIST_BINS)?;
    let hist = |xs: &[f64]| {
        let mut c = vec![0.0; HIST_BINS];
        xs.iter().for_each(|&x| c[bin_of(&grid, x)] += 1.0);
        let m = xs.len() as f64;
        c.iter_mut().for_each(|v| *v /= m);
        c
    };
    let (ha, hb) = (hist(a), hist(b));
    Ok(0.5 * ha.iter().zip(&hb).map(|(p, q)| (p - q).abs()).sum::<f64>())
}
