//! N-particle overdamped Langevin dynamics, Metropolis-adjusted Langevin
//! sampling of the Gibbs and modulated Gibbs measures, and replica ensembles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{self, GridDensity, DENSITY_FLOOR};
use crate::kernels::{ConfinementSpec, KernelSpec};

/// Deepest allowed step halving; below it the step size would drop under `dt · 2⁻²⁰`.
pub const MAX_HALVINGS: u32 = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticleConfig {
    n: usize,
    d: usize,
    positions: Vec<f64>,
}

impl ParticleConfig {
    pub fn new(n: usize, d: usize, positions: Vec<f64>) -> Result<Self> {
        if n == 0 || !(1..=3).contains(&d) {
            return Err(Error::InvalidInput(format!("need N ≥ 1 and d in 1..=3, got N = {n}, d = {d}")));
        }
        if positions.len() != n * d {
            return Err(Error::InvalidInput(format!("{} coordinates for N = {n}, d = {d}", positions.len())));
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite particle position".into()));
        }
        Ok(Self { n, d, positions })
    }

    /// One-dimensional configuration.
    pub fn line(positions: Vec<f64>) -> Result<Self> {
        Self::new(positions.len(), 1, positions)
    }

    /// `N` iid draws from a piecewise-constant density.
    pub fn sample_iid<R: Rng + ?Sized>(n: usize, mu: &GridDensity, rng: &mut R) -> Self {
        let sampler = DensitySampler::new(mu);
        let positions = (0..n).map(|_| sampler.sample(rng)).collect();
        Self { n, d: 1, positions }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.d..(i + 1) * self.d]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Sorted copy for one-dimensional singular runs.
    pub fn sorted(mut self) -> Self {
        if self.d == 1 {
            self.positions.sort_by(f64::total_cmp);
        }
        self
    }

    /// First coincident pair, if any.
    pub fn coincident_pair(&self) -> Option<(usize, usize)> {
        let order = self.lex_order();
        order.windows(2).find(|w| self.position(w[0]) == self.position(w[1])).map(|w| (w[0].min(w[1]), w[0].max(w[1])))
    }

    /// Indices sorted lexicographically by position.
    fn lex_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.sort_by(|&a, &b| {
            self.position(a)
                .iter()
                .zip(self.position(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        idx
    }

    pub fn center_of_mass(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.d];
        for i in 0..self.n {
            for (k, x) in self.position(i).iter().enumerate() {
                c[k] += x / self.n as f64;
            }
        }
        c
    }
}

/// Inverse-CDF sampler of a piecewise-constant density.
#[derive(Debug, Clone)]
pub struct DensitySampler {
    lo: f64,
    h: f64,
    cdf: Vec<f64>,
}

impl DensitySampler {
    pub fn new(mu: &GridDensity) -> Self {
        let mut cdf = mu.cdf_table();
        let total = *cdf.last().unwrap();
        cdf.iter_mut().for_each(|c| *c /= total);
        Self { lo: mu.grid().lo(), h: mu.grid().h(), cdf }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        // first face with cdf > u
        let k = self.cdf.partition_point(|&c| c <= u).clamp(1, self.cdf.len() - 1) - 1;
        let width = self.cdf[k + 1] - self.cdf[k];
        let frac = if width > 0.0 { ((u - self.cdf[k]) / width).clamp(0.0, 1.0) } else { 0.5 };
        self.lo + (k as f64 + frac) * self.h
    }
}

/// `H_N = (1/2N) Σ_{i≠j} g(x_i, x_j) + Σ_i V(x_i)`.
pub fn energy(cfg: &ParticleConfig, kernel: &KernelSpec, conf: &ConfinementSpec) -> f64 {
    let n = cfg.n();
    let mut pair = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            pair += kernel.eval(cfg.position(i), cfg.position(j));
        }
    }
    let confinement: f64 = (0..n).map(|i| conf.value(cfg.position(i))).sum();
    pair / n as f64 + confinement
}

/// `(1/N) Σ_{j≠i} ∇₁g(x_i, x_j)` for every `i`, summed in a label-independent order.
pub fn interaction_gradient(cfg: &ParticleConfig, kernel: &KernelSpec) -> Result<Vec<f64>> {
    let (n, d) = (cfg.n(), cfg.d());
    let mut out = vec![0.0; n * d];
    if kernel.is_zero() || n == 1 {
        return Ok(out);
    }
    let order = cfg.lex_order();
    let inv_n = 1.0 / n as f64;
    if d == 1 {
        let x = cfg.positions();
        for i in 0..n {
            let mut acc = 0.0;
            for &j in &order {
                if j != i {
                    let z = x[i] - x[j];
                    if z == 0.0 && kernel.is_singular() {
                        return Err(Error::CoincidentPoints { i: i.min(j), j: i.max(j) });
                    }
                    acc += kernel.grad_1d(z);
                }
            }
            out[i] = acc * inv_n;
        }
        return Ok(out);
    }
    for i in 0..n {
        for &j in &order {
            if j == i {
                continue;
            }
            let g = kernel
                .grad(cfg.position(i), cfg.position(j))
                .map_err(|_| Error::CoincidentPoints { i: i.min(j), j: i.max(j) })?;
            for k in 0..d {
                out[i * d + k] += g[k] * inv_n;
            }
        }
    }
    Ok(out)
}

/// Drift `-(1/N) Σ_{j≠i} ∇₁g(x_i, x_j) - ∇V(x_i)`.
pub fn drift(cfg: &ParticleConfig, kernel: &KernelSpec, conf: &ConfinementSpec) -> Result<Vec<f64>> {
    let mut b = interaction_gradient(cfg, kernel)?;
    let d = cfg.d();
    for i in 0..cfg.n() {
        let gv = conf.grad(cfg.position(i));
        for k in 0..d {
            b[i * d + k] = -b[i * d + k] - gv[k];
        }
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SdeParams {
    /// Inverse temperature; `f64::INFINITY` switches the noise off.
    pub beta: f64,
    pub dt: f64,
    /// Bridge refinements tried before a crossing is resolved by reflection.
    pub max_halvings: u32,
    /// Cap on each coordinate's drift displacement, in units of `sqrt(dt)`;
    /// `f64::INFINITY` gives the plain Euler–Maruyama step.
    pub drift_cap: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub halvings: u64,
    pub reflections: u64,
}

impl std::ops::AddAssign for StepStats {
    fn add_assign(&mut self, o: Self) {
        self.halvings += o.halvings;
        self.reflections += o.reflections;
    }
}

/// One Euler–Maruyama step of the particle SDE.
///
/// In one dimension with a singular kernel the ordering of the particles is
/// preserved: a step that reorders a pair is redone as two half steps along a
/// Brownian bridge, recursively up to `max_halvings` times, after which the
/// crossing pairs are reflected (the new positions are reassigned in the old
/// order).
pub fn sde_step<R: Rng + ?Sized>(
    cfg: &ParticleConfig,
    kernel: &KernelSpec,
    conf: &ConfinementSpec,
    params: &SdeParams,
    rng: &mut R,
) -> Result<(ParticleConfig, StepStats)> {
    if !(params.dt > 0.0) || params.max_halvings > MAX_HALVINGS {
        return Err(Error::InvalidInput(format!(
            "need dt > 0 and at most {MAX_HALVINGS} halvings, got dt = {}, {}",
            params.dt, params.max_halvings
        )));
    }
    if !(params.drift_cap > 0.0) {
        return Err(Error::InvalidInput(format!("drift cap must be positive, got {}", params.drift_cap)));
    }
    let noisy = params.beta.is_finite();
    let increments: Vec<f64> = if noisy {
        let s = params.dt.sqrt();
        (0..cfg.positions.len()).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    } else {
        vec![0.0; cfg.positions.len()]
    };
    sde_step_with_increments(cfg, kernel, conf, params, &increments, rng)
}

/// [`sde_step`] with the Brownian increments over `dt` given explicitly.
pub fn sde_step_with_increments<R: Rng + ?Sized>(
    cfg: &ParticleConfig,
    kernel: &KernelSpec,
    conf: &ConfinementSpec,
    params: &SdeParams,
    increments: &[f64],
    rng: &mut R,
) -> Result<(ParticleConfig, StepStats)> {
    let ordered = cfg.d() == 1 && kernel.is_singular() && cfg.n() > 1;
    let order = if ordered { cfg.lex_order() } else { Vec::new() };
    let mut stats = StepStats::default();
    let out = advance(cfg, kernel, conf, params, params.dt, increments, 0, &order, &mut stats, rng)?;
    Ok((out, stats))
}

fn euler(cfg: &ParticleConfig, kernel: &KernelSpec, conf: &ConfinementSpec, params: &SdeParams, dt: f64, dw: &[f64]) -> Result<ParticleConfig> {
    let b = drift(cfg, kernel, conf)?;
    let amp = if params.beta.is_finite() { (2.0 / params.beta).sqrt() } else { 0.0 };
    let cap = params.drift_cap * dt.sqrt();
    let positions: Vec<f64> =
        cfg.positions.iter().zip(&b).zip(dw).map(|((x, bi), w)| x + (dt * bi).clamp(-cap, cap) + amp * w).collect();
    if positions.iter().any(|x| !x.is_finite()) {
        return Err(Error::StepFailure { replica: 0, message: "non-finite position after a step".into() });
    }
    Ok(ParticleConfig { n: cfg.n, d: cfg.d, positions })
}

fn preserves_order(cfg: &ParticleConfig, order: &[usize]) -> bool {
    order.windows(2).all(|w| cfg.positions[w[0]] < cfg.positions[w[1]])
}

#[allow(clippy::too_many_arguments)]
fn advance<R: Rng + ?Sized>(
    cfg: &ParticleConfig,
    kernel: &KernelSpec,
    conf: &ConfinementSpec,
    params: &SdeParams,
    dt: f64,
    dw: &[f64],
    depth: u32,
    order: &[usize],
    stats: &mut StepStats,
    rng: &mut R,
) -> Result<ParticleConfig> {
    let next = euler(cfg, kernel, conf, params, dt, dw)?;
    if order.is_empty() || preserves_order(&next, order) {
        return Ok(next);
    }
    if depth < params.max_halvings {
        stats.halvings += 1;
        // Brownian bridge midpoint: W(dt/2) | W(dt) ~ N(W/2, dt/4)
        let half: Vec<f64> = dw
            .iter()
            .map(|w| {
                let eta: f64 = if params.beta.is_finite() { rng.sample(StandardNormal) } else { 0.0 };
                0.5 * w + 0.5 * dt.sqrt() * eta
            })
            .collect();
        let rest: Vec<f64> = dw.iter().zip(&half).map(|(w, a)| w - a).collect();
        let mid = advance(cfg, kernel, conf, params, 0.5 * dt, &half, depth + 1, order, stats, rng)?;
        return advance(&mid, kernel, conf, params, 0.5 * dt, &rest, depth + 1, order, stats, rng);
    }
    // hard-core reflection: hand the sorted positions back in the old order
    stats.reflections += 1;
    let mut values = next.positions.clone();
    values.sort_by(f64::total_cmp);
    let mut positions = vec![0.0; values.len()];
    for (rank, &i) in order.iter().enumerate() {
        positions[i] = values[rank];
    }
    let out = ParticleConfig { n: cfg.n, d: 1, positions };
    if let Some((i, j)) = out.coincident_pair() {
        return Err(Error::CoincidentPoints { i, j });
    }
    Ok(out)
}

/// Target measure of the Metropolis-adjusted Langevin sampler.
#[derive(Debug, Clone)]
pub enum MalaTarget {
    /// `∝ exp(-β H_N)` restricted to `window` in every coordinate.
    Gibbs { conf: ConfinementSpec, window: (f64, f64) },
    /// `∝ exp(-β N F_N(X_N, μ)) Π μ(x_i)` with piecewise-constant `μ` (d = 1).
    Modulated { mu: GridDensity },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MalaParams {
    pub beta: f64,
    pub dt: f64,
    /// Metropolis correction on (MALA) or off (unadjusted Langevin).
    pub adjust: bool,
}

/// Log-density evaluator with the gradient used by the proposal.
struct TargetEval<'a> {
    target: &'a MalaTarget,
    kernel: &'a KernelSpec,
    beta: f64,
    log_mu: Vec<f64>,
}

impl<'a> TargetEval<'a> {
    fn new(target: &'a MalaTarget, kernel: &'a KernelSpec, beta: f64) -> Self {
        let log_mu = match target {
            MalaTarget::Modulated { mu } => mu.values().iter().map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).collect(),
            MalaTarget::Gibbs { .. } => Vec::new(),
        };
        Self { target, kernel, beta, log_mu }
    }

    /// Pair part `(1/2N) Σ_{i≠j} g`, infinite at coincidences.
    fn pair_energy(&self, cfg: &ParticleConfig) -> f64 {
        let n = cfg.n();
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += self.kernel.eval(cfg.position(i), cfg.position(j));
            }
        }
        acc / n as f64
    }

    fn log_density(&self, cfg: &ParticleConfig) -> f64 {
        match self.target {
            MalaTarget::Gibbs { conf, window } => {
                if cfg.positions.iter().any(|&x| x < window.0 || x > window.1) {
                    return f64::NEG_INFINITY;
                }
                let e = self.pair_energy(cfg) + (0..cfg.n()).map(|i| conf.value(cfg.position(i))).sum::<f64>();
                -self.beta * e
            }
            MalaTarget::Modulated { mu } => {
                let mut log_mu = 0.0;
                let mut cross = 0.0;
                for &x in cfg.positions() {
                    match mu.grid().cell_of(x) {
                        Some(k) if self.log_mu[k].is_finite() => log_mu += self.log_mu[k],
                        _ => return f64::NEG_INFINITY,
                    }
                    cross += grid::conv_at(self.kernel, mu, x);
                }
                -self.beta * (self.pair_energy(cfg) - cross) + log_mu
            }
        }
    }

    fn grad_log_density(&self, cfg: &ParticleConfig) -> Result<Vec<f64>> {
        let mut g = interaction_gradient(cfg, self.kernel)?;
        match self.target {
            MalaTarget::Gibbs { conf, .. } => {
                let d = cfg.d();
                for i in 0..cfg.n() {
                    let gv = conf.grad(cfg.position(i));
                    for k in 0..d {
                        g[i * d + k] = -self.beta * (g[i * d + k] + gv[k]);
                    }
                }
            }
            MalaTarget::Modulated { mu } => {
                for (i, &x) in cfg.positions().iter().enumerate() {
                    let cross = grid::conv_grad_at(self.kernel, mu, x);
                    g[i] = -self.beta * (g[i] - cross) + self.log_mu_slope(mu, x);
                }
            }
        }
        Ok(g)
    }

    /// Slope of the piecewise-linear interpolation of `log μ` between centers.
    fn log_mu_slope(&self, mu: &GridDensity, x: f64) -> f64 {
        let grid = mu.grid();
        let n = grid.n_cells();
        let s = ((x - grid.lo()) / grid.h() - 0.5).floor();
        let k = (s.max(0.0) as usize).min(n - 2);
        let (a, b) = (self.log_mu[k], self.log_mu[k + 1]);
        if a.is_finite() && b.is_finite() {
            (b - a) / grid.h()
        } else {
            0.0
        }
    }
}

/// Drift cap in units of the proposal standard deviation `sqrt(2 dt)`.
const DRIFT_CAP: f64 = 2.0;

/// `dt g` clipped to `±DRIFT_CAP sqrt(2 dt)`.
///
/// Near a singularity of the kernel the raw drift overshoots by orders of
/// magnitude and the chain freezes; clipping keeps the proposal local. The
/// reverse move uses the same map, so the Metropolis correction stays exact.
fn truncated_drift(dt: f64, g: f64) -> f64 {
    let cap = DRIFT_CAP * (2.0 * dt).sqrt();
    (dt * g).clamp(-cap, cap)
}

/// Metropolis–Hastings acceptance test on log scale.
pub fn mh_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    let u: f64 = rng.random();
    u.ln() < log_ratio
}

/// A single MALA chain.
pub struct MalaChain<'a> {
    eval: TargetEval<'a>,
    params: MalaParams,
    state: ParticleConfig,
    log_pi: f64,
    grad: Vec<f64>,
    accepted: u64,
    proposed: u64,
    window_accepted: u64,
    window_proposed: u64,
}

impl<'a> MalaChain<'a> {
    pub fn new(target: &'a MalaTarget, kernel: &'a KernelSpec, params: MalaParams, start: ParticleConfig) -> Result<Self> {
        if !(params.dt > 0.0 && params.beta > 0.0 && params.beta.is_finite()) {
            return Err(Error::InvalidInput("MALA needs dt > 0 and finite β > 0".into()));
        }
        if let MalaTarget::Modulated { .. } = target {
            if start.d() != 1 {
                return Err(Error::InvalidInput("modulated targets are one-dimensional".into()));
            }
        }
        let eval = TargetEval::new(target, kernel, params.beta);
        let log_pi = eval.log_density(&start);
        if !log_pi.is_finite() {
            return Err(Error::Support("MALA start has zero target density".into()));
        }
        let grad = eval.grad_log_density(&start)?;
        Ok(Self { eval, params, state: start, log_pi, grad, accepted: 0, proposed: 0, window_accepted: 0, window_proposed: 0 })
    }

    pub fn state(&self) -> &ParticleConfig {
        &self.state
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            1.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// One proposal; fails with a mixing error if a block of 10³ proposals accepts under 1%.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<bool> {
        let dt = self.params.dt;
        let s = (2.0 * dt).sqrt();
        let mean: Vec<f64> = self.state.positions.iter().zip(&self.grad).map(|(x, g)| x + truncated_drift(dt, *g)).collect();
        let proposal: Vec<f64> = mean.iter().map(|m| m + s * rng.sample::<f64, _>(StandardNormal)).collect();
        let cand = ParticleConfig { n: self.state.n, d: self.state.d, positions: proposal };
        let log_pi = self.eval.log_density(&cand);
        let mut accept = false;
        if log_pi.is_finite() {
            if let Ok(grad) = self.eval.grad_log_density(&cand) {
                accept = if self.params.adjust {
                    let fwd: f64 = cand.positions.iter().zip(&mean).map(|(y, m)| (y - m).powi(2)).sum::<f64>();
                    let back: f64 = self
                        .state
                        .positions
                        .iter()
                        .zip(cand.positions.iter().zip(&grad))
                        .map(|(x, (y, g))| (x - y - truncated_drift(dt, *g)).powi(2))
                        .sum::<f64>();
                    let log_ratio = log_pi - self.log_pi - (back - fwd) / (4.0 * dt);
                    mh_accept(log_ratio, rng)
                } else {
                    true
                };
                if accept {
                    self.state = cand;
                    self.log_pi = log_pi;
                    self.grad = grad;
                }
            }
        }
        self.proposed += 1;
        self.window_proposed += 1;
        if accept {
            self.accepted += 1;
            self.window_accepted += 1;
        }
        if self.window_proposed == 1000 {
            let rate = self.window_accepted as f64 / 1000.0;
            self.window_accepted = 0;
            self.window_proposed = 0;
            if rate < 0.01 {
                return Err(Error::MixingFailure { rate, steps: 1000 });
            }
        }
        Ok(accept)
    }
}

/// Draws `n_samples` states from one chain after `burn_in` steps, keeping every `thin`-th state.
#[allow(clippy::too_many_arguments)]
pub fn mala_sample<R: Rng + ?Sized>(
    target: &MalaTarget,
    kernel: &KernelSpec,
    params: MalaParams,
    start: ParticleConfig,
    burn_in: usize,
    n_samples: usize,
    thin: usize,
    rng: &mut R,
) -> Result<(Vec<ParticleConfig>, f64)> {
    let mut chain = MalaChain::new(target, kernel, params, start)?;
    for _ in 0..burn_in {
        chain.step(rng)?;
    }
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        for _ in 0..thin.max(1) {
            chain.step(rng)?;
        }
        out.push(chain.state().clone());
    }
    Ok((out, chain.acceptance_rate()))
}

/// Initial configuration for a MALA target: iid from `μ`, or from `e^{-βV}` on the window.
pub fn mala_start<R: Rng + ?Sized>(target: &MalaTarget, n: usize, beta: f64, rng: &mut R) -> Result<ParticleConfig> {
    match target {
        MalaTarget::Modulated { mu } => Ok(ParticleConfig::sample_iid(n, mu, rng).sorted()),
        MalaTarget::Gibbs { conf, window } => {
            let g = grid::Grid1D::new(window.0, window.1, 1024)?;
            let mu = GridDensity::from_unnormalized(g, g.centers().iter().map(|&x| (-beta * conf.value_1d(x)).exp()).collect())?;
            Ok(ParticleConfig::sample_iid(n, &mu, rng).sorted())
        }
    }
}

/// Mass of `e^{-βV}` outside the window, relative to a wide reference grid.
pub fn window_truncation(conf: &ConfinementSpec, beta: f64, window: (f64, f64)) -> Result<f64> {
    let width = window.1 - window.0;
    let wide = grid::Grid1D::new(window.0 - 4.0 * width, window.1 + 4.0 * width, 8192)?;
    let exps: Vec<f64> = wide.centers().iter().map(|&x| -beta * conf.value_1d(x)).collect();
    let top = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = exps.iter().map(|e| (e - top).exp()).collect();
    let total: f64 = w.iter().sum();
    let outside: f64 =
        wide.centers().iter().zip(&w).filter(|(x, _)| **x < window.0 || **x > window.1).map(|(_, v)| v).sum();
    Ok(outside / total.max(DENSITY_FLOOR))
}

/// RNG for one replica: stream `replica` of the ChaCha generator keyed by the master seed.
pub fn replica_rng(master_seed: u64, replica: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replica as u64);
    rng
}

#[derive(Debug, Clone)]
pub enum Dynamics {
    Sde(SdeParams),
    Mala { target: MalaTarget, params: MalaParams },
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSnapshot {
    pub t: f64,
    pub configs: Vec<ParticleConfig>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct EnsembleStats {
    pub steps: StepStats,
    pub acceptance: Vec<f64>,
}

/// Runs `m` independent replicas to `t_end`, snapshotting every `cadence` time units.
///
/// Replica `k` draws its initial configuration and all its noise from
/// [`replica_rng`]`(master_seed, k)`, so the output does not depend on how the
/// replicas are scheduled.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble<F>(
    init: F,
    dynamics: &Dynamics,
    kernel: &KernelSpec,
    conf: &ConfinementSpec,
    m: usize,
    master_seed: u64,
    t_end: f64,
    cadence: f64,
) -> Result<(Vec<EnsembleSnapshot>, EnsembleStats)>
where
    F: Fn(&mut ChaCha8Rng) -> Result<ParticleConfig> + Sync,
{
    if m == 0 {
        return Err(Error::InvalidInput("ensemble needs M ≥ 1".into()));
    }
    let dt = match dynamics {
        Dynamics::Sde(p) => p.dt,
        Dynamics::Mala { params, .. } => params.dt,
    };
    let n_steps = (t_end / dt).round() as usize;
    let every = ((cadence / dt).round() as usize).max(1);
    let mut snap_steps: Vec<usize> = (0..=n_steps).step_by(every).collect();
    if *snap_steps.last().unwrap() != n_steps {
        snap_steps.push(n_steps);
    }

    let replicas: Vec<Result<(Vec<ParticleConfig>, StepStats, f64)>> = (0..m)
        .into_par_iter()
        .map(|k| {
            let mut rng = replica_rng(master_seed, k);
            let with_id = |e: Error| match e {
                Error::StepFailure { message, .. } => Error::StepFailure { replica: k, message },
                Error::CoincidentPoints { i, j } => {
                    Error::StepFailure { replica: k, message: format!("coincident particles {i} and {j}") }
                }
                other => other,
            };
            let mut cfg = init(&mut rng).map_err(with_id)?;
            let mut snaps = Vec::with_capacity(snap_steps.len());
            let mut stats = StepStats::default();
            let mut next_snap = 0;
            let mut record = |step: usize, cfg: &ParticleConfig, snaps: &mut Vec<ParticleConfig>| {
                if next_snap < snap_steps.len() && snap_steps[next_snap] == step {
                    snaps.push(cfg.clone());
                    next_snap += 1;
                }
            };
            record(0, &cfg, &mut snaps);
            let acceptance = match dynamics {
                Dynamics::Sde(p) => {
                    for step in 1..=n_steps {
                        let (next, s) = sde_step(&cfg, kernel, conf, p, &mut rng).map_err(with_id)?;
                        stats += s;
                        cfg = next;
                        record(step, &cfg, &mut snaps);
                    }
                    1.0
                }
                Dynamics::Mala { target, params } => {
                    let mut chain = MalaChain::new(target, kernel, *params, cfg.clone()).map_err(with_id)?;
                    for step in 1..=n_steps {
                        chain.step(&mut rng).map_err(with_id)?;
                        record(step, chain.state(), &mut snaps);
                    }
                    chain.acceptance_rate()
                }
            };
            Ok((snaps, stats, acceptance))
        })
        .collect();

    let mut per_replica = Vec::with_capacity(m);
    let mut stats = EnsembleStats::default();
    for r in replicas {
        let (snaps, s, acc) = r?;
        stats.steps += s;
        stats.acceptance.push(acc);
        per_replica.push(snaps);
    }
    let snapshots = snap_steps
        .iter()
        .enumerate()
        .map(|(i, &step)| EnsembleSnapshot {
            t: step as f64 * dt,
            configs: per_replica.iter().map(|snaps| snaps[i].clone()).collect(),
        })
        .collect();
    Ok((snapshots, stats))
}

impl EnsembleSnapshot {
    pub const CSV_HEADER_1D: &'static str = "replica,particle,x";

    /// Rows `replica,particle,x[,y,z]`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let d = self.configs.first().map_or(1, |c| c.d());
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = ["replica,particle,x", "replica,particle,x,y", "replica,particle,x,y,z"][d - 1];
        writeln!(w, "{header}")?;
        for (r, cfg) in self.configs.iter().enumerate() {
            for i in 0..cfg.n() {
                write!(w, "{r},{i}")?;
                for x in cfg.position(i) {
                    write!(w, ",{x}")?;
                }
                writeln!(w)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a snapshot CSV back into configurations.
    pub fn read_csv(path: &std::path::Path, t: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::InvalidInput("empty snapshot file".into()))?;
        let d = header.split(',').count().saturating_sub(2);
        if !(1..=3).contains(&d) {
            return Err(Error::InvalidInput(format!("bad snapshot header '{header}'")));
        }
        let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::InvalidInput(format!("bad snapshot row {}", ln + 2));
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != d + 2 {
                return Err(bad());
            }
            let r = parts[0].trim().parse().map_err(|_| bad())?;
            let i = parts[1].trim().parse().map_err(|_| bad())?;
            let x = parts[2..].iter().map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
            rows.push((r, i, x));
        }
        let m = rows.iter().map(|r| r.0).max().map_or(0, |v| v + 1);
        let mut configs = Vec::with_capacity(m);
        for r in 0..m {
            let mut mine: Vec<&(usize, usize, Vec<f64>)> = rows.iter().filter(|row| row.0 == r).collect();
            mine.sort_by_key(|row| row.1);
            let positions = mine.iter().flat_map(|row| row.2.iter().copied()).collect();
            configs.push(ParticleConfig::new(mine.len(), d, positions)?);
        }
        Ok(Self { t, configs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid1D;
    use crate::kernels::SmoothKernel;
    use approx::assert_abs_diff_eq;

    fn quad(kappa: f64) -> ConfinementSpec {
        ConfinementSpec::quadratic(kappa, 1).unwrap()
    }

    fn flat() -> ConfinementSpec {
        ConfinementSpec::quartic(0.0, 0.0, 1).unwrap()
    }

    #[test]
    fn zero_noise_gradient_flow() {
        let cfg = ParticleConfig::line(vec![1.0]).unwrap();
        let params = SdeParams { beta: f64::INFINITY, dt: 0.1, max_halvings: 3, drift_cap: f64::INFINITY };
        let mut rng = replica_rng(0, 0);
        let (next, _) = sde_step(&cfg, &KernelSpec::log(1).unwrap(), &quad(1.0), &params, &mut rng).unwrap();
        assert_abs_diff_eq!(next.positions()[0], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn drift_cap_clips_only_large_displacements() {
        let kernel = KernelSpec::log(1).unwrap();
        let capped = SdeParams { beta: f64::INFINITY, dt: 0.01, max_halvings: 0, drift_cap: 1.0 };
        let mut rng = replica_rng(0, 0);
        // a lone particle moves by dt·x = 0.01 < 0.1, untouched
        let one = ParticleConfig::line(vec![1.0]).unwrap();
        let (next, _) = sde_step(&one, &kernel, &quad(1.0), &capped, &mut rng).unwrap();
        assert_abs_diff_eq!(next.positions()[0], 0.99, epsilon = 1e-15);
        // a near-collision kick of dt/gap = 1e4 is clipped to sqrt(dt)
        let pair = ParticleConfig::line(vec![-5e-7, 5e-7]).unwrap();
        let (next, _) = sde_step(&pair, &kernel, &flat(), &capped, &mut rng).unwrap();
        assert_abs_diff_eq!(next.positions()[1], 5e-7 + 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(next.positions()[0], -5e-7 - 0.1, epsilon = 1e-12);
        let bad = SdeParams { drift_cap: 0.0, ..capped };
        assert!(sde_step(&one, &kernel, &quad(1.0), &bad, &mut rng).is_err());
    }

    #[test]
    fn log_pair_repels() {
        let kernel = KernelSpec::log(1).unwrap();
        let mut cfg = ParticleConfig::line(vec![-0.05, 0.05]).unwrap();
        let params = SdeParams { beta: f64::INFINITY, dt: 1e-3, max_halvings: 3, drift_cap: f64::INFINITY };
        let mut rng = replica_rng(0, 0);
        let mut gap = 0.1;
        for _ in 0..200 {
            cfg = sde_step(&cfg, &kernel, &flat(), &params, &mut rng).unwrap().0;
            let g = cfg.positions()[1] - cfg.positions()[0];
            assert!(g > gap);
            gap = g;
        }
    }

    #[test]
    fn zero_noise_energy_decreases() {
        let kernel = KernelSpec::log(1).unwrap();
        let conf = quad(1.0);
        let mut cfg = ParticleConfig::line(vec![-2.0, -0.3, 0.1, 0.15, 1.9, 2.5]).unwrap();
        let params = SdeParams { beta: f64::INFINITY, dt: 1e-3, max_halvings: 3, drift_cap: f64::INFINITY };
        let mut rng = replica_rng(0, 0);
        let mut e = energy(&cfg, &kernel, &conf);
        for _ in 0..2000 {
            cfg = sde_step(&cfg, &kernel, &conf, &params, &mut rng).unwrap().0;
            let next = energy(&cfg, &kernel, &conf);
            assert!(next <= e + 1e-14);
            e = next;
        }
    }

    #[test]
    fn symmetric_pair_has_centered_mean() {
        let kernel = KernelSpec::log(1).unwrap();
        let conf = quad(1.0);
        let params = SdeParams { beta: 1.0, dt: 1e-2, max_halvings: 3, drift_cap: f64::INFINITY };
        let init = |_: &mut ChaCha8Rng| ParticleConfig::line(vec![-0.5, 0.5]);
        let (snaps, _) = run_ensemble(init, &Dynamics::Sde(params), &kernel, &conf, 1000, 3, 1.0, 1.0).unwrap();
        let com: Vec<f64> = snaps.last().unwrap().configs.iter().map(|c| c.center_of_mass()[0]).collect();
        let mean = com.iter().sum::<f64>() / com.len() as f64;
        let var = com.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (com.len() - 1) as f64;
        assert!(mean.abs() <= 3.0 * (var / com.len() as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn weyl_chamber_is_preserved() {
        let kernel = KernelSpec::log(1).unwrap();
        let conf = quad(1.0);
        let params = SdeParams { beta: 1.0, dt: 0.05, max_halvings: 2, drift_cap: f64::INFINITY };
        let init = |rng: &mut ChaCha8Rng| {
            let xs: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            Ok(ParticleConfig::line(xs)?.sorted())
        };
        let (snaps, stats) = run_ensemble(init, &Dynamics::Sde(params), &kernel, &conf, 8, 11, 2.0, 0.05).unwrap();
        for s in &snaps {
            for c in &s.configs {
                assert!(c.positions().windows(2).all(|w| w[0] < w[1]));
            }
        }
        // crossings are common at this step size, so both mechanisms fire
        assert!(stats.steps.halvings > 0 && stats.steps.reflections > 0);
    }

    #[test]
    fn bridge_refinement_is_used_before_reflection() {
        let kernel = KernelSpec::log(1).unwrap();
        let cfg = ParticleConfig::line(vec![0.0, 0.01]).unwrap();
        let params = SdeParams { beta: 1.0, dt: 0.01, max_halvings: 20, drift_cap: f64::INFINITY };
        let mut rng = replica_rng(5, 0);
        // increments that swap the pair over a full step
        let (next, stats) = sde_step_with_increments(&cfg, &kernel, &flat(), &params, &[2.0, -2.0], &mut rng).unwrap();
        assert!(next.positions()[0] < next.positions()[1]);
        assert!(stats.halvings >= 1);
    }

    #[test]
    fn exchangeable_under_relabeling() {
        let kernel = KernelSpec::smooth(SmoothKernel::Gaussian, 2).unwrap();
        let conf = ConfinementSpec::quadratic(1.0, 2).unwrap();
        let params = SdeParams { beta: 2.0, dt: 0.01, max_halvings: 0, drift_cap: f64::INFINITY };
        let pos = vec![0.1, 0.2, -0.7, 0.4, 1.1, -0.3, 0.0, 0.9];
        let perm = [2usize, 0, 3, 1];
        let permute = |v: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&p| v[2 * p..2 * p + 2].to_vec()).collect() };
        let mut a = ParticleConfig::new(4, 2, pos.clone()).unwrap();
        let mut b = ParticleConfig::new(4, 2, permute(&pos)).unwrap();
        let mut rng = replica_rng(1, 0);
        let mut dummy = replica_rng(2, 0);
        for _ in 0..100 {
            let dw: Vec<f64> = (0..8).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
            a = sde_step_with_increments(&a, &kernel, &conf, &params, &dw, &mut dummy).unwrap().0;
            b = sde_step_with_increments(&b, &kernel, &conf, &params, &permute(&dw), &mut dummy).unwrap().0;
            assert_eq!(permute(a.positions()), b.positions().to_vec());
        }
    }

    #[test]
    fn ensembles_are_deterministic() {
        let kernel = KernelSpec::log(1).unwrap();
        let conf = quad(1.0);
        let params = SdeParams { beta: 1.0, dt: 0.01, max_halvings: 3, drift_cap: f64::INFINITY };
        let init = |rng: &mut ChaCha8Rng| {
            let xs: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            Ok(ParticleConfig::line(xs)?.sorted())
        };
        let run = |m| run_ensemble(init, &Dynamics::Sde(params), &kernel, &conf, m, 42, 0.5, 0.1).unwrap().0;
        let a = run(4);
        let b = run(4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.configs, y.configs);
        }
        // M = 1 matches a direct single trajectory
        let single = run(1);
        let mut rng = replica_rng(42, 0);
        let mut cfg = init(&mut rng).unwrap();
        for _ in 0..50 {
            cfg = sde_step(&cfg, &kernel, &conf, &params, &mut rng).unwrap().0;
        }
        assert_eq!(single.last().unwrap().configs[0], cfg);
        assert_eq!(a.last().unwrap().configs[0], cfg);
    }

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    /// Batch-means standard error of a correlated series.
    fn batch_se(xs: &[f64]) -> f64 {
        let b = 50;
        let len = xs.len() / b;
        let means: Vec<f64> = (0..b).map(|i| xs[i * len..(i + 1) * len].iter().sum::<f64>() / len as f64).collect();
        (mean_var(&means).1 / b as f64).sqrt()
    }

    #[test]
    fn metropolis_correction_removes_discretization_bias() {
        let zero = KernelSpec::zero(1).unwrap();
        let target = MalaTarget::Gibbs { conf: quad(1.0), window: (-50.0, 50.0) };
        let dt = 0.5;
        let run = |adjust: bool| {
            let params = MalaParams { beta: 1.0, dt, adjust };
            let mut rng = replica_rng(9, adjust as usize);
            let (samples, _) =
                mala_sample(&target, &zero, params, ParticleConfig::line(vec![0.0]).unwrap(), 1000, 200_000, 1, &mut rng)
                    .unwrap();
            let xs: Vec<f64> = samples.iter().map(|c| c.positions()[0]).collect();
            let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
            (mean_var(&xs).0, batch_se(&xs), mean_var(&sq).0, batch_se(&sq))
        };
        // unadjusted chain x' = (1 - dt) x + sqrt(2 dt) ξ has variance 2 / (2 - dt)
        let (_, _, v_ula, se_ula) = run(false);
        assert!((v_ula - 2.0 / (2.0 - dt)).abs() <= 4.0 * se_ula, "{v_ula}");
        assert!((v_ula - 1.0).abs() > 10.0 * se_ula);
        let (m, se_m, v, se_v) = run(true);
        assert!(m.abs() <= 3.0 * se_m);
        assert!((v - 1.0).abs() <= 3.0 * se_v, "{v} ± {se_v}");
    }

    #[test]
    fn metropolis_rule_on_three_states() {
        // target π and an asymmetric proposal on {0, 1, 2}
        let pi = [0.2, 0.5, 0.3];
        let q = [[0.1, 0.6, 0.3], [0.3, 0.3, 0.4], [0.5, 0.25, 0.25]];
        let mut rng = replica_rng(4, 0);
        let mut state = 0usize;
        let mut counts = [0usize; 3];
        let steps = 400_000;
        for _ in 0..steps {
            let u: f64 = rng.random();
            let prop = if u < q[state][0] { 0 } else if u < q[state][0] + q[state][1] { 1 } else { 2 };
            let log_ratio = (pi[prop] * q[prop][state]).ln() - (pi[state] * q[state][prop]).ln();
            if mh_accept(log_ratio, &mut rng) {
                state = prop;
            }
            counts[state] += 1;
        }
        for k in 0..3 {
            assert!((counts[k] as f64 / steps as f64 - pi[k]).abs() < 1e-2);
        }
    }

    #[test]
    fn zero_kernel_modulated_target_is_product() {
        let grid = Grid1D::new(-3.0, 3.0, 64).unwrap();
        let mu = GridDensity::from_fn(grid, |x| (-(x - 0.3).powi(2)).exp() + 0.5 * (-(x + 1.0).powi(2) * 4.0).exp()).unwrap();
        let target = MalaTarget::Modulated { mu: mu.clone() };
        let zero = KernelSpec::zero(1).unwrap();
        let params = MalaParams { beta: 1.0, dt: 0.05, adjust: true };
        let mut xs = Vec::new();
        for chain in 0..20 {
            let mut rng = replica_rng(8, chain);
            let start = mala_start(&target, 2, 1.0, &mut rng).unwrap();
            let (samples, rate) = mala_sample(&target, &zero, params, start, 500, 500, 10, &mut rng).unwrap();
            assert!(rate > 0.3);
            xs.extend(samples.iter().flat_map(|c| c.positions().to_vec()));
        }
        // 64-bin histogram against the cell masses
        let h = grid.h();
        let mut counts = vec![0.0; 64];
        for x in &xs {
            counts[grid.cell_of(*x).unwrap()] += 1.0;
        }
        let tv: f64 = 0.5
            * counts.iter().zip(mu.values()).map(|(c, m)| (c / xs.len() as f64 - m * h).abs()).sum::<f64>();
        assert!(tv < 0.05, "tv {tv}");
    }

    #[test]
    fn sampler_respects_cells() {
        let grid = Grid1D::new(0.0, 1.0, 16).unwrap();
        let mut vals = vec![0.0; 16];
        vals[3] = 1.0;
        vals[9] = 3.0;
        let mu = GridDensity::from_unnormalized(grid, vals).unwrap();
        let sampler = DensitySampler::new(&mu);
        let mut rng = replica_rng(0, 1);
        let mut in9 = 0;
        for _ in 0..4000 {
            let x = sampler.sample(&mut rng);
            let k = grid.cell_of(x).unwrap();
            assert!(k == 3 || k == 9);
            in9 += (k == 9) as usize;
        }
        assert!((in9 as f64 / 4000.0 - 0.75).abs() < 0.03);
    }

    #[test]
    fn mixing_failure_is_reported() {
        let kernel = KernelSpec::log(1).unwrap();
        let target = MalaTarget::Gibbs { conf: quad(1.0), window: (-5.0, 5.0) };
        let params = MalaParams { beta: 1.0, dt: 50.0, adjust: true };
        let mut rng = replica_rng(0, 0);
        let start = ParticleConfig::line(vec![-0.5, 0.0, 0.5, 1.0]).unwrap();
        let err = mala_sample(&target, &kernel, params, start, 2000, 0, 1, &mut rng).unwrap_err();
        assert!(matches!(err, Error::MixingFailure { .. }));
    }

    #[test]
    fn chain_started_at_a_near_collision_keeps_moving() {
        let kernel = KernelSpec::log(1).unwrap();
        let target = MalaTarget::Gibbs { conf: quad(2.0), window: (-6.0, 6.0) };
        let params = MalaParams { beta: 1.0, dt: 0.05, adjust: true };
        let mut rng = replica_rng(3, 0);
        let start = ParticleConfig::line(vec![-0.5, 0.0, 1e-7, 0.5]).unwrap();
        let (_, acc) = mala_sample(&target, &kernel, params, start, 0, 3000, 1, &mut rng).unwrap();
        assert!(acc > 0.3, "acceptance {acc}");
    }

    #[test]
    fn snapshot_csv_round_trip() {
        let dir = tempdir();
        let snap = EnsembleSnapshot {
            t: 0.5,
            configs: vec![
                ParticleConfig::line(vec![0.25, -1.5]).unwrap(),
                ParticleConfig::line(vec![3.0, 1e-7]).unwrap(),
            ],
        };
        let path = dir.join("snap.csv");
        snap.write_csv(&path).unwrap();
        let back = EnsembleSnapshot::read_csv(&path, 0.5).unwrap();
        assert_eq!(back.configs, snap.configs);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("chaoslab-particles-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn window_truncation_is_small_for_wide_windows() {
        assert!(window_truncation(&quad(1.0), 1.0, (-8.0, 8.0)).unwrap() < 1e-12);
        assert!(window_truncation(&quad(1.0), 1.0, (-1.0, 1.0)).unwrap() > 0.3);
    }
}
