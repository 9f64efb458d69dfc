//! Canned experiments. Each recipe writes CSVs plus a `manifest.json` into its
//! output directory; audit verdicts are always read back from a margin column
//! of a CSV that the recipe itself wrote, so every reported number has a
//! source file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use chaoslab::diagnostics::{self, TheoryConstants, MAX_PARTITION_N};
use chaoslab::equilibrium::{self, EquilibriumOptions, EquilibriumResult, LsiOptions};
use chaoslab::grid::{Grid1D, GridDensity, GridField};
use chaoslab::kernels::{ConfinementSpec, KernelSpec};
use chaoslab::liouville::{self, JointInit, LiouvilleOptions, LiouvilleSolver};
use chaoslab::meanfield::{MeanFieldRecord, MeanFieldSolver, StepMode};
use chaoslab::particles::{
    self, DensitySampler, Dynamics, EnsembleSnapshot, MalaParams, MalaTarget, ParticleConfig, SdeParams,
};
use chaoslab::Error;
use serde::Serialize;

use crate::config::{DynamicsKind, ExperimentConfig, JointKind, MalaTargetKind};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    Equilibrium,
    Meanfield,
    Particles,
    Liouville,
    Diagnose,
    ChaosReport,
}

impl Recipe {
    pub const ALL: [Recipe; 6] = [
        Recipe::Equilibrium,
        Recipe::Meanfield,
        Recipe::Particles,
        Recipe::Liouville,
        Recipe::Diagnose,
        Recipe::ChaosReport,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Equilibrium => "equilibrium",
            Recipe::Meanfield => "meanfield",
            Recipe::Particles => "particles",
            Recipe::Liouville => "liouville",
            Recipe::Diagnose => "diagnose",
            Recipe::ChaosReport => "chaos-report",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

/// Verdict on one inequality: the smallest value of a margin column, which
/// already includes the tolerance, must be nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Audit {
    pub name: String,
    pub status: Status,
    pub worst_margin: Option<f64>,
    pub rows: usize,
    /// `file:column`, relative to the recipe's output directory.
    pub source: String,
}

/// A reported number taken from one CSV cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metric {
    pub name: String,
    pub value: Option<f64>,
    pub source: String,
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub audits: Vec<Audit>,
    pub metrics: Vec<Metric>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.audits.iter().all(|a| a.status != Status::Fail)
    }
}

/// Optional inputs of the `diagnose` recipe.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    /// Directory with particle snapshots and their `index.csv`.
    pub snapshots: Option<PathBuf>,
    /// Reference density CSV (`x,value`); the equilibrium by default.
    pub density: Option<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    recipe: &'a str,
    version: &'a str,
    master_seed: u64,
    threads: usize,
    wall_time_seconds: f64,
    passed: bool,
    config: &'a ExperimentConfig,
}

/// Runs a recipe into `out`, creating the directory if needed.
pub fn run_recipe(recipe: Recipe, cfg: &ExperimentConfig, out: &Path, inputs: &Inputs) -> Result<Outcome> {
    let start = Instant::now();
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    log::info!("running {} into {}", recipe.name(), out.display());
    let outcome = match recipe {
        Recipe::Equilibrium => equilibrium_recipe(cfg, out)?,
        Recipe::Meanfield => meanfield_recipe(cfg, out)?,
        Recipe::Particles => particles_recipe(cfg, out)?,
        Recipe::Liouville => liouville_recipe(cfg, out)?,
        Recipe::Diagnose => diagnose_recipe(cfg, out, inputs)?,
        Recipe::ChaosReport => chaos_report(cfg, out)?,
    };
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        recipe: recipe.name(),
        version: env!("CARGO_PKG_VERSION"),
        master_seed: cfg.ensemble.master_seed,
        threads: rayon::current_num_threads(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        passed: outcome.passed(),
        config: cfg,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(outcome)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn row(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").unwrap();
    }
    s
}

/// One column of a CSV written by this module.
pub fn read_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().with_context(|| format!("{} is empty", path.display()))?;
    let idx = header
        .split(',')
        .position(|h| h == column)
        .with_context(|| format!("{} has no column '{column}'", path.display()))?;
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let cell = l.split(',').nth(idx).unwrap_or("");
            if cell.is_empty() {
                Ok(f64::NAN)
            } else {
                cell.parse::<f64>().with_context(|| format!("bad number '{cell}' in {}", path.display()))
            }
        })
        .collect()
}

/// Audit read back from `dir/file`, column `column`.
pub fn audit_from_csv(dir: &Path, name: &str, file: &str, column: &str) -> Result<Audit> {
    let values = read_column(&dir.join(file), column)?;
    let worst = values.iter().copied().reduce(|a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.min(b) });
    let status = match worst {
        None => Status::NotApplicable,
        Some(w) if w >= 0.0 => Status::Pass,
        Some(_) => Status::Fail,
    };
    Ok(Audit {
        name: name.into(),
        status,
        worst_margin: worst.filter(|w| w.is_finite()),
        rows: values.len(),
        source: format!("{file}:{column}"),
    })
}

#[derive(Debug, Clone, Copy)]
pub enum Pick {
    First,
    Last,
    Min,
    Max,
}

pub fn metric_from_csv(dir: &Path, name: &str, file: &str, column: &str, pick: Pick) -> Result<Metric> {
    let values = read_column(&dir.join(file), column)?;
    let value = match pick {
        Pick::First => values.first().copied(),
        Pick::Last => values.last().copied(),
        Pick::Min => values.iter().copied().reduce(f64::min),
        Pick::Max => values.iter().copied().reduce(f64::max),
    };
    Ok(Metric { name: name.into(), value: value.filter(|v| v.is_finite()), source: format!("{file}:{column}") })
}

fn prefixed(mut outcome: Outcome, prefix: &str) -> Outcome {
    for a in &mut outcome.audits {
        a.source = format!("{prefix}/{}", a.source);
    }
    for m in &mut outcome.metrics {
        m.source = format!("{prefix}/{}", m.source);
    }
    outcome
}

struct Setup {
    grid: Grid1D,
    kernel: KernelSpec,
    conf: ConfinementSpec,
    eq: EquilibriumResult,
}

fn require_1d(cfg: &ExperimentConfig, what: &str) -> Result<()> {
    if cfg.kernel.d != 1 {
        return Err(Error::InvalidInput(format!("the {what} recipe works on a one-dimensional grid, got d = {}", cfg.kernel.d)).into());
    }
    Ok(())
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let grid = cfg.grid()?;
    let kernel = cfg.kernel_spec()?;
    let conf = cfg.confinement_spec()?;
    let opts = EquilibriumOptions { tol: cfg.tolerances.equilibrium, ..EquilibriumOptions::default() };
    let eq = equilibrium::solve_thermal_equilibrium(&kernel, &conf, cfg.beta, &grid, &opts)?;
    Ok(Setup { grid, kernel, conf, eq })
}

fn step_mode(cfg: &ExperimentConfig) -> Result<StepMode> {
    match cfg.dynamics.kind {
        DynamicsKind::Explicit => Ok(StepMode::Explicit),
        DynamicsKind::SemiImplicit => Ok(StepMode::SemiImplicit),
        other => Err(Error::InvalidInput(format!(
            "grid solvers need dynamics.kind = explicit or semi_implicit, got {other:?}"
        ))
        .into()),
    }
}

/// A labelled bounded shape `h` used to perturb the equilibrium.
pub type Perturbation = (String, Box<dyn Fn(f64) -> f64>);

/// The perturbations used to probe the minimizer.
pub fn perturbations() -> Vec<Perturbation> {
    let mut out: Vec<Perturbation> = Vec::new();
    for c in [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5] {
        out.push((format!("tanh_{c}"), Box::new(move |x: f64| ((x - c) / 0.5).tanh())));
    }
    for (k, phase) in [(0.5, 0.0), (1.0, 0.0), (1.0, 1.5), (2.0, 0.0), (2.0, 0.7), (3.0, 0.0), (4.0, 0.3)] {
        out.push((format!("sin_{k}_{phase}"), Box::new(move |x: f64| (k * x + phase).sin())));
    }
    for c in [-1.0, 0.0, 1.0] {
        for sign in [1.0, -1.0] {
            out.push((format!("bump_{c}_{sign}"), Box::new(move |x: f64| sign * (-(x - c) * (x - c) / 0.5).exp())));
        }
    }
    out
}

pub const PERTURBATION_SIZE: f64 = 0.1;

fn equilibrium_recipe(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    require_1d(cfg, "equilibrium")?;
    let s = setup(cfg)?;
    let mu = &s.eq.mu_beta;
    let lsi = equilibrium::convexity_constant(mu, mu, &s.conf, &s.kernel, cfg.beta, &LsiOptions::default())?;
    let f_star = equilibrium::free_energy(mu, &s.kernel, &s.conf, cfg.beta)?;
    mu.write_csv(&out.join("mu_beta.csv"))?;
    let tol = cfg.tolerances.equilibrium;
    write_csv(
        &out.join("equilibrium.csv"),
        "c_beta,residual,iterations,kappa,c_ls,free_energy,residual_margin",
        [row(&[s.eq.c_beta, s.eq.residual, s.eq.iterations as f64, lsi.kappa, lsi.c_ls, f_star, tol - s.eq.residual])],
    )?;
    write_json(
        &out.join("equilibrium.json"),
        &serde_json::json!({
            "c_beta": s.eq.c_beta,
            "residual": s.eq.residual,
            "kappa": lsi.kappa,
            "c_ls": lsi.c_ls,
            "iterations": s.eq.iterations,
            "free_energy": f_star,
        }),
    )?;
    let slack = cfg.tolerances.monotone * (1.0 + f_star.abs());
    let mut rows = Vec::new();
    for (i, (label, h)) in perturbations().iter().enumerate() {
        let perturbed = equilibrium::tilt(mu, |x| PERTURBATION_SIZE * h(x))?;
        let f = equilibrium::free_energy(&perturbed, &s.kernel, &s.conf, cfg.beta)?;
        rows.push(format!("{i},{label},{},{},{},{}", PERTURBATION_SIZE, f, f - f_star, f - f_star + slack));
    }
    write_csv(&out.join("perturbations.csv"), "index,label,epsilon,free_energy,delta,margin", rows)?;
    Ok(Outcome {
        audits: vec![
            audit_from_csv(out, "equilibrium_residual", "equilibrium.csv", "residual_margin")?,
            audit_from_csv(out, "equilibrium_minimizer", "perturbations.csv", "margin")?,
        ],
        metrics: vec![
            metric_from_csv(out, "equilibrium_kappa", "equilibrium.csv", "kappa", Pick::First)?,
            metric_from_csv(out, "equilibrium_residual", "equilibrium.csv", "residual", Pick::First)?,
        ],
    })
}

fn meanfield_recipe(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    require_1d(cfg, "meanfield")?;
    let s = setup(cfg)?;
    let mode = step_mode(cfg)?;
    let solver = MeanFieldSolver::new(&s.kernel, &s.conf, cfg.beta, &s.grid, mode)?;
    let mu0 = cfg.initial.mu.build(s.grid, &s.eq.mu_beta)?;
    let sup_bound = 2.0 * mu0.sup_norm().max(s.eq.mu_beta.sup_norm());
    let d = &cfg.dynamics;
    let run = solver.run(mu0, d.dt, d.t_end, d.snapshot_dt, Some(&s.eq.mu_beta))?;
    write_csv(&out.join("records.csv"), MeanFieldRecord::CSV_HEADER, run.records.iter().map(|r| r.csv_row()))?;

    let dens = out.join("densities");
    fs::create_dir_all(&dens)?;
    let mut index = Vec::new();
    for (i, snap) in run.snapshots.iter().enumerate() {
        let name = format!("mu_{i:04}.csv");
        snap.mu.write_csv(&dens.join(&name))?;
        index.push(format!("{name},{}", snap.t));
    }
    write_csv(&dens.join("index.csv"), "file,t", index)?;

    let mut rows = Vec::new();
    for w in run.records.windows(2) {
        let increase = w[1].free_energy - w[0].free_energy;
        let slack = cfg.tolerances.monotone * (1.0 + w[0].free_energy.abs());
        rows.push(row(&[w[1].t, increase, slack - increase, sup_bound - w[1].sup_mu]));
    }
    write_csv(&out.join("monotone.csv"), "t,increase,margin,sup_margin", rows)?;
    Ok(Outcome {
        audits: vec![
            audit_from_csv(out, "free_energy_monotone", "monotone.csv", "margin")?,
            audit_from_csv(out, "sup_norm_bounded", "monotone.csv", "sup_margin")?,
        ],
        metrics: vec![metric_from_csv(out, "l1_to_equilibrium_final", "records.csv", "l1_dist_to_equilibrium", Pick::Last)?],
    })
}

fn write_snapshots(dir: &Path, snapshots: &[EnsembleSnapshot]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = Vec::new();
    for (i, snap) in snapshots.iter().enumerate() {
        let name = format!("particles_{i:04}.csv");
        snap.write_csv(&dir.join(&name))?;
        index.push(format!("{name},{}", snap.t));
    }
    write_csv(&dir.join("index.csv"), "file,t", index)
}

/// Reads the snapshots listed in `dir/index.csv`.
pub fn read_snapshots(dir: &Path) -> Result<Vec<EnsembleSnapshot>> {
    let index = dir.join("index.csv");
    let text = fs::read_to_string(&index).with_context(|| format!("cannot read {}", index.display()))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (file, t) = l.split_once(',').with_context(|| format!("bad index row '{l}'"))?;
            let t: f64 = t.parse().with_context(|| format!("bad time '{t}'"))?;
            Ok(EnsembleSnapshot::read_csv(&dir.join(file), t)?)
        })
        .collect()
}

fn particles_recipe(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let s = setup_for_particles(cfg)?;
    let d = &cfg.dynamics;
    let (n, m, seed) = (cfg.ensemble.n, cfg.ensemble.m, cfg.ensemble.master_seed);
    let groups = cfg.ensemble.groups;
    let mu0 = cfg.initial.mu.build(s.grid, &s.eq.mu_beta)?;
    let dynamics = match d.kind {
        DynamicsKind::Sde => Dynamics::Sde(SdeParams {
            beta: cfg.beta,
            dt: d.dt,
            max_halvings: d.max_halvings,
            drift_cap: d.drift_cap.unwrap_or(f64::INFINITY),
        }),
        DynamicsKind::Mala => Dynamics::Mala {
            target: match d.target {
                MalaTargetKind::Gibbs => MalaTarget::Gibbs { conf: s.conf.clone(), window: (cfg.grid.lo, cfg.grid.hi) },
                MalaTargetKind::Modulated => MalaTarget::Modulated { mu: mu0.clone() },
            },
            params: MalaParams { beta: cfg.beta, dt: d.dt, adjust: true },
        },
        other => bail!(Error::InvalidInput(format!("the particles recipe needs dynamics.kind = sde or mala, got {other:?}"))),
    };
    // coordinates iid from μ⁰, sorted on the line
    let sampler = DensitySampler::new(&mu0);
    let dim = cfg.kernel.d;
    let init = |rng: &mut _| {
        let x: Vec<f64> = (0..n * dim).map(|_| sampler.sample(rng)).collect();
        let c = ParticleConfig::new(n, dim, x)?;
        Ok(if dim == 1 { c.sorted() } else { c })
    };
    // groups are consecutive blocks of replica streams
    let (snapshots, stats) =
        particles::run_ensemble(init, &dynamics, &s.kernel, &s.conf, m * groups, seed, d.t_end, d.snapshot_dt)?;
    write_snapshots(&out.join("snapshots"), &snapshots)?;
    let acc = &stats.acceptance;
    // mass of e^{-βV} the windowed Gibbs target leaves out
    let truncation = match (d.kind, d.target) {
        (DynamicsKind::Mala, MalaTargetKind::Gibbs) if dim == 1 => {
            Some(particles::window_truncation(&s.conf, cfg.beta, (cfg.grid.lo, cfg.grid.hi))?)
        }
        _ => None,
    };
    write_json(
        &out.join("stats.json"),
        &serde_json::json!({
            "halvings": stats.steps.halvings,
            "reflections": stats.steps.reflections,
            "acceptance_mean": acc.iter().sum::<f64>() / acc.len() as f64,
            "acceptance_min": acc.iter().copied().fold(f64::INFINITY, f64::min),
            "window_truncation": truncation,
        }),
    )?;

    let mut metrics = Vec::new();
    if cfg.kernel.d == 1 {
        // reference marginal at each snapshot time
        let references: Vec<GridDensity> = match d.kind {
            DynamicsKind::Sde => {
                let mf = MeanFieldSolver::new(&s.kernel, &s.conf, cfg.beta, &s.grid, StepMode::SemiImplicit)?;
                let run = mf.run(mu0.clone(), d.dt, d.t_end, d.snapshot_dt, None)?;
                run.snapshots.into_iter().map(|st| st.mu).collect()
            }
            _ => {
                let target = if d.target == MalaTargetKind::Gibbs { s.eq.mu_beta.clone() } else { mu0.clone() };
                vec![target; snapshots.len()]
            }
        };
        if references.len() != snapshots.len() {
            bail!("mean-field and ensemble snapshot times disagree");
        }
        let mut rows = Vec::new();
        for (snap, reference) in snapshots.iter().zip(&references) {
            let pooled = diagnostics::pooled_marginal(std::slice::from_ref(snap), 1)?;
            let w2s = snap
                .configs
                .chunks(m)
                .map(|c| {
                    let group = EnsembleSnapshot { t: snap.t, configs: c.to_vec() };
                    Ok(diagnostics::w2_to_density(&diagnostics::pooled_marginal(&[group], 1)?, reference))
                })
                .collect::<Result<Vec<f64>>>()?;
            let (w2, w2_se) = mean_and_se(&w2s);
            let (tv, kl, floor) = match diagnostics::marginal_distances(std::slice::from_ref(snap), reference, 1) {
                Ok(md) => (md.tv, md.kl, diagnostics::tv_noise_floor(reference, 1, md.samples)),
                Err(Error::InsufficientSamples { .. }) => (f64::NAN, f64::NAN, f64::NAN),
                Err(e) => return Err(e.into()),
            };
            rows.push(row(&[snap.t, w2, w2_se, tv, kl, floor, pooled.len() as f64]));
        }
        write_csv(&out.join("marginals.csv"), "t,w2,w2_se,tv,kl,tv_floor,samples", rows)?;
        metrics.push(metric_from_csv(out, "w2_final", "marginals.csv", "w2", Pick::Last)?);
    }
    Ok(Outcome { audits: Vec::new(), metrics })
}

/// Mean and its standard error; the error is NaN for a single value.
fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Grid, kernel and equilibrium for particle work; the equilibrium is only
/// computed on the line and replaced by a Gaussian placeholder otherwise.
fn setup_for_particles(cfg: &ExperimentConfig) -> Result<Setup> {
    if cfg.kernel.d == 1 {
        return setup(cfg);
    }
    let grid = cfg.grid()?;
    let placeholder = GridDensity::gaussian(grid, 0.0, 1.0)?;
    Ok(Setup {
        grid,
        kernel: cfg.kernel_spec()?,
        conf: cfg.confinement_spec()?,
        eq: EquilibriumResult { mu_beta: placeholder, c_beta: f64::NAN, residual: f64::NAN, iterations: 0 },
    })
}

fn liouville_recipe(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    require_1d(cfg, "liouville")?;
    let s = setup(cfg)?;
    let mode = step_mode(cfg)?;
    let n = cfg.ensemble.n;
    let mu_beta = &s.eq.mu_beta;
    let mu0 = cfg.initial.mu.build(s.grid, mu_beta)?;
    let a = cfg.initial.a.map(|a| a.build(s.grid, mu_beta)).transpose()?;
    let b = cfg.initial.b.map(|b| b.build(s.grid, mu_beta)).transpose()?;
    let init = match cfg.initial.joint {
        JointKind::Product => JointInit::Product(a.as_ref().unwrap_or(&mu0)),
        JointKind::Mixture => JointInit::Mixture(a.as_ref().unwrap(), b.as_ref().unwrap()),
        JointKind::ModulatedGibbs => JointInit::ModulatedGibbs(&mu0),
        JointKind::Gibbs => JointInit::Gibbs(&s.conf, s.grid),
    };
    let f0 = liouville::build_joint(init, &s.kernel, cfg.beta, n)?;
    let solver = LiouvilleSolver::new(&s.kernel, &s.conf, cfg.beta, &s.grid, n, mode)?;
    let constants: TheoryConstants = cfg.theory_constants();
    let d = &cfg.dynamics;
    let opts = LiouvilleOptions { dt: d.dt, t_end: d.t_end, snapshot_dt: d.snapshot_dt, constants, lsi: LsiOptions::default() };
    let run = solver.run(f0, mu0, Some(mu_beta), &opts)?;
    let records = &run.records;
    write_csv(
        &out.join("records.csv"),
        liouville::FreeEnergyRecord::CSV_HEADER,
        records.iter().map(|r| r.csv_row()),
    )?;

    let tol_disc = cfg.tol_disc();
    let diss = liouville::dissipation_audit(records, cfg.beta, tol_disc);
    write_csv(
        &out.join("dissipation.csv"),
        "t,de_dt,bound,margin,sharp_residual",
        diss.rows.iter().map(|r| row(&[r.t, r.de_dt, r.bound, r.margin, r.sharp_residual])),
    )?;

    let lsi = liouville::lsi_chain_audit(records, n, cfg.beta, cfg.tolerances.lsi);
    write_csv(
        &out.join("lsi.csv"),
        "t,fisher,rhs,rhs_flipped,margin",
        lsi.rows.iter().map(|r| row(&[r.t, r.fisher, r.rhs, r.rhs_flipped, r.fisher + cfg.tolerances.lsi - r.rhs])),
    )?;

    let gronwall = match liouville::gronwall_audit(records, n, cfg.beta, &constants, cfg.tolerances.gronwall) {
        Ok(g) => Some(g),
        Err(Error::InvalidLsi { t, kappa }) => {
            log::warn!("no LSI certificate at t = {t} (kappa = {kappa}); the Gronwall audit does not apply");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let g_rows = gronwall.as_ref().map_or(Vec::new(), |g| g.rows.iter().map(|r| row(&[r.t, r.e_script, r.rhs, r.margin])).collect());
    write_csv(&out.join("gronwall.csv"), "t,e_script,rhs,margin", g_rows)?;

    let h0 = records.first().map_or(f64::NAN, |r| r.h_rel);
    write_csv(
        &out.join("chaos.csv"),
        "t,h_rel,h_rel_ratio,marginal_l1",
        records
            .iter()
            .zip(run.marginals.iter().zip(&run.mean_field))
            .map(|(r, (m, mu))| row(&[r.t, r.h_rel, r.h_rel / h0, m.l1_distance(mu)])),
    )?;

    let times: Vec<f64> = records.iter().map(|r| r.t).collect();
    let h_q: Vec<f64> = records.iter().map(|r| r.h_q).collect();
    let kappa_min = records.iter().map(|r| r.kappa).fold(f64::INFINITY, f64::min);
    write_json(
        &out.join("audit.json"),
        &serde_json::json!({
            "tol_disc": tol_disc,
            "dissipation": {
                "violations": diss.violations,
                "worst_margin": diss.worst_margin,
                "worst_sharp_residual": diss.worst_sharp_residual,
                "worst_interior_sharp_residual": diss.worst_interior_sharp_residual,
            },
            "lsi_chain": {
                "checked": lsi.checked,
                "records": records.len(),
                "violations": lsi.violations,
                "violations_flipped_sign": lsi.violations_flipped,
                "worst_margin": lsi.worst_margin,
            },
            "gronwall": gronwall.as_ref().map(|g| serde_json::json!({
                "c_ls": g.c_ls,
                "violations": g.violations,
                "worst_margin": g.worst_margin,
                "negative_e_script": g.negative_e_script,
                "fitted_rate": g.fitted_rate,
                "bound_rate": g.bound_rate,
                "plain_lsi_rate": g.plain_lsi_rate,
            })),
            "kappa_min": kappa_min,
            "h_q_decay_rate": liouville::decay_rate(&times, &h_q),
        }),
    )?;

    Ok(Outcome {
        audits: vec![
            audit_from_csv(out, "dissipation_inequality", "dissipation.csv", "margin")?,
            audit_from_csv(out, "lsi_chain", "lsi.csv", "margin")?,
            audit_from_csv(out, "gronwall_bound", "gronwall.csv", "margin")?,
        ],
        metrics: vec![
            metric_from_csv(out, "entropy_ratio_final", "chaos.csv", "h_rel_ratio", Pick::Last)?,
            metric_from_csv(out, "marginal_l1_final", "chaos.csv", "marginal_l1", Pick::Last)?,
            metric_from_csv(out, "kappa_min", "records.csv", "kappa", Pick::Min)?,
        ],
    })
}

/// Particle counts for the partition-function table.
fn partition_sizes(n: usize) -> Vec<usize> {
    let mut sizes = vec![2, 4, 8];
    if !sizes.contains(&n) && n <= MAX_PARTITION_N {
        sizes.push(n);
        sizes.sort_unstable();
    }
    sizes
}

fn diagnose_recipe(cfg: &ExperimentConfig, out: &Path, inputs: &Inputs) -> Result<Outcome> {
    require_1d(cfg, "diagnose")?;
    let s = setup(cfg)?;
    let (mu, is_equilibrium) = match &inputs.density {
        Some(p) => (GridDensity::read_csv(p)?, false),
        None => (s.eq.mu_beta.clone(), true),
    };
    let beta = cfg.beta;
    let constants = cfg.theory_constants();
    let sampling = &cfg.sampling;
    let seed = cfg.ensemble.master_seed;
    let sup_mu = mu.sup_norm();
    let singular = s.kernel.is_singular();
    let mut audits = Vec::new();

    // log K_{N,β}(μ): importance sampling against the Jensen floor, the upper bound and,
    // for N = 2, the tensor-grid value
    let jensen = diagnostics::jensen_lower_bound(&mu, &s.kernel, beta)?;
    let mut rows = Vec::new();
    for (i, n) in partition_sizes(cfg.ensemble.n).into_iter().enumerate() {
        let mut rng = particles::replica_rng(seed, i);
        let est = diagnostics::log_partition_estimate(&mu, &s.kernel, beta, n, sampling.is_samples, &mut rng)?;
        let upper = diagnostics::partition_upper_bound(n, sup_mu, &s.kernel, beta, &constants).unwrap_or(f64::NAN);
        let exact = if n == 2 && mu.grid() == &s.grid { liouville::modulated_gibbs(&mu, &s.kernel, beta, 2)?.log_k } else { f64::NAN };
        let band = 3.0 * est.std_error;
        let floor_margin = est.estimate + band - jensen;
        let upper_margin = if upper.is_nan() { f64::INFINITY } else { upper + band - est.estimate };
        let exact_margin = if exact.is_nan() { f64::INFINITY } else { band - (est.estimate - exact).abs() };
        rows.push(row(&[
            n as f64,
            est.estimate,
            est.std_error,
            est.ess,
            jensen,
            upper,
            exact,
            floor_margin.min(upper_margin).min(exact_margin),
        ]));
    }
    write_csv(&out.join("partition.csv"), "n,log_k,std_error,ess,jensen_floor,upper_bound,tensor_exact,margin", rows)?;
    audits.push(audit_from_csv(out, "partition_bounds", "partition.csv", "margin")?);

    // exponential moment under Q_{N,β}(μ) sampled by MALA
    let n = cfg.ensemble.n;
    if n <= MAX_PARTITION_N {
        let q = mala_chains(&MalaTarget::Modulated { mu: mu.clone() }, &s.kernel, beta, n, sampling, seed, 1000)?;
        let mut rng = particles::replica_rng(seed, 999);
        let em = diagnostics::exponential_moment_check(&mu, &s.kernel, beta, &q.samples, sampling.is_samples, &mut rng)?;
        write_csv(
            &out.join("moment.csv"),
            "n,lhs,lhs_error,rhs,rhs_error,discrepancy,combined_error,acceptance,margin",
            [row(&[
                n as f64,
                em.lhs,
                em.lhs_error,
                em.rhs,
                em.rhs_error,
                em.discrepancy(),
                em.combined_error(),
                q.acceptance,
                3.0 * em.combined_error() - em.discrepancy(),
            ])],
        )?;
        audits.push(audit_from_csv(out, "exponential_moment", "moment.csv", "margin")?);

        // at equilibrium the Gibbs measure and the modulated Gibbs measure coincide
        if is_equilibrium {
            let window = (cfg.grid.lo, cfg.grid.hi);
            let p = mala_chains(&MalaTarget::Gibbs { conf: s.conf.clone(), window }, &s.kernel, beta, n, sampling, seed, 2000)?;
            let xs_p: Vec<f64> = p.samples.iter().flat_map(|c| c.positions().to_vec()).collect();
            let xs_q: Vec<f64> = q.samples.iter().flat_map(|c| c.positions().to_vec()).collect();
            let tv = diagnostics::two_sample_tv(&xs_p, &xs_q, window)?;
            let w2 = diagnostics::w2_two_sample(&xs_p, &xs_q);
            let sup_rel = if s.grid.n_cells().pow(2) <= liouville::MAX_JOINT_CELLS {
                let q2 = liouville::modulated_gibbs(&s.eq.mu_beta, &s.kernel, beta, 2)?.q;
                let p2 = liouville::build_joint(JointInit::Gibbs(&s.conf, s.grid), &s.kernel, beta, 2)?;
                p2.values().iter().zip(q2.values()).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max)
            } else {
                f64::NAN
            };
            write_csv(
                &out.join("gibbs_identity.csv"),
                "n,tv,w2,tv_limit,tv_margin,tensor_sup_rel,tensor_limit,tensor_margin",
                [row(&[n as f64, tv, w2, GIBBS_TV_LIMIT, GIBBS_TV_LIMIT - tv, sup_rel, GIBBS_SUP_LIMIT, GIBBS_SUP_LIMIT - sup_rel])],
            )?;
            audits.push(audit_from_csv(out, "gibbs_identity_tv", "gibbs_identity.csv", "tv_margin")?);
            audits.push(audit_from_csv(out, "gibbs_identity_tensor", "gibbs_identity.csv", "tensor_margin")?);
        }
    }

    // functionals of supplied particle snapshots
    if let Some(dir) = &inputs.snapshots {
        let snapshots = read_snapshots(dir)?;
        let eval = diagnostics::ModulatedEnergy::new(&s.kernel, &mu)?;
        let mut rows = Vec::new();
        for snap in &snapshots {
            let Some(first) = snap.configs.first() else { continue };
            let n = first.n();
            let f: Vec<f64> = snap.configs.iter().map(|c| eval.evaluate(c).map(|b| b.total)).collect::<chaoslab::Result<_>>()?;
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            let var = f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (f.len().max(2) - 1) as f64;
            let min = f.iter().copied().fold(f64::INFINITY, f64::min);
            let (floor, o_n) = if singular {
                (
                    diagnostics::riesz_lower_bound(n, sup_mu, &s.kernel, &constants)?,
                    diagnostics::error_terms(n, sup_mu, &s.kernel, &constants, None).map_or(f64::NAN, |e| e.o_n),
                )
            } else {
                (f64::NAN, liouville::additive_error(n, sup_mu, &s.kernel, &constants)?)
            };
            let violations = f.iter().filter(|&&v| v < floor).count();
            let margin_ii = diagnostics::assumption_ii_margin(mean, 0.0, o_n, &constants);
            let pooled = diagnostics::pooled_marginal(std::slice::from_ref(snap), 1)?;
            let w2 = diagnostics::w2_to_density(&pooled, &mu);
            let u = GridField::from_fn(*mu.grid(), |x| x)?;
            let comm: Vec<f64> = snap
                .configs
                .iter()
                .map(|c| diagnostics::commutator_functional(&u, c, &mu, &s.kernel))
                .collect::<chaoslab::Result<_>>()?;
            let comm_mean = comm.iter().sum::<f64>() / comm.len() as f64;
            rows.push(row(&[
                snap.t,
                snap.configs.len() as f64,
                mean,
                var.sqrt(),
                min,
                floor,
                violations as f64,
                o_n,
                margin_ii,
                comm_mean,
                w2,
            ]));
        }
        write_csv(
            &out.join("functionals.csv"),
            "t,replicas,mean_f,std_f,min_f,riesz_floor,floor_violations,o_n,assumption_margin,commutator_x,w2",
            rows,
        )?;
    }
    Ok(Outcome { audits, metrics: Vec::new() })
}

pub const GIBBS_TV_LIMIT: f64 = 0.05;
pub const GIBBS_SUP_LIMIT: f64 = 1e-6;

struct ChainSamples {
    samples: Vec<ParticleConfig>,
    acceptance: f64,
}

/// Independent MALA chains; chain `c` uses stream `offset + c` of the master seed.
fn mala_chains(
    target: &MalaTarget,
    kernel: &KernelSpec,
    beta: f64,
    n: usize,
    sampling: &crate::config::SamplingConfig,
    seed: u64,
    offset: usize,
) -> Result<ChainSamples> {
    use rayon::prelude::*;
    let params = MalaParams { beta, dt: sampling.mala_dt, adjust: true };
    let chains: Vec<chaoslab::Result<(Vec<ParticleConfig>, f64)>> = (0..sampling.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = particles::replica_rng(seed, offset + c);
            let start = particles::mala_start(target, n, beta, &mut rng)?;
            particles::mala_sample(target, kernel, params, start, sampling.burn_in, sampling.chain_samples, sampling.thin, &mut rng)
        })
        .collect();
    let mut samples = Vec::new();
    let mut acceptance = 0.0;
    for c in chains {
        let (s, a) = c?;
        samples.extend(s);
        acceptance += a / sampling.chains as f64;
    }
    Ok(ChainSamples { samples, acceptance })
}

#[derive(Serialize)]
struct Summary<'a> {
    schema_version: u32,
    status: Status,
    audits: &'a [Audit],
    metrics: &'a [Metric],
}

/// Equilibrium, mean-field and tensor-grid runs, with one summary of every audit.
fn chaos_report(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let mut all = Outcome::default();
    for (recipe, sub) in [(Recipe::Equilibrium, "equilibrium"), (Recipe::Meanfield, "meanfield"), (Recipe::Liouville, "liouville")] {
        let o = run_recipe(recipe, cfg, &out.join(sub), &Inputs::default())?;
        let o = prefixed(o, sub);
        all.audits.extend(o.audits);
        all.metrics.extend(o.metrics);
    }
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        status: if all.passed() { Status::Pass } else { Status::Fail },
        audits: &all.audits,
        metrics: &all.metrics,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(all)
}
