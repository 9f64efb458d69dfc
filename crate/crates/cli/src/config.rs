//! Experiment configuration: a TOML document walked by hand so that every
//! problem is reported with its path, not just the first one serde trips over.

use std::collections::BTreeSet;
use std::fmt;

use chaoslab::diagnostics::TheoryConstants;
use chaoslab::grid::{Grid1D, GridDensity};
use chaoslab::kernels::{ConfinementSpec, KernelSpec, SmoothKernel};
use serde::Serialize;
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

/// Every problem found in one configuration document.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} configuration error(s):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  {e}")?;
        }
        Ok(())
    }
}

impl ConfigErrors {
    pub fn mentions(&self, path: &str) -> bool {
        self.0.iter().any(|e| e.path == path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Log,
    Riesz,
    Gaussian,
    Cosine,
    Constant,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelConfig {
    pub family: KernelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    pub d: usize,
}

impl KernelConfig {
    pub fn spec(&self) -> chaoslab::Result<KernelSpec> {
        match self.family {
            KernelKind::Log => KernelSpec::log(self.d),
            KernelKind::Riesz => KernelSpec::riesz(self.s.unwrap_or(f64::NAN), self.d),
            KernelKind::Gaussian => KernelSpec::smooth(SmoothKernel::Gaussian, self.d),
            KernelKind::Cosine => KernelSpec::smooth(SmoothKernel::Cosine { omega: self.omega.unwrap_or(f64::NAN) }, self.d),
            KernelKind::Constant => KernelSpec::smooth(SmoothKernel::Constant(self.c.unwrap_or(f64::NAN)), self.d),
            KernelKind::Zero => KernelSpec::zero(self.d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum ConfinementConfig {
    Quadratic { kappa: f64 },
    Quartic { a: f64, b: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub n_cells: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsKind {
    Explicit,
    SemiImplicit,
    Sde,
    Mala,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MalaTargetKind {
    Gibbs,
    Modulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DynamicsConfig {
    pub kind: DynamicsKind,
    pub dt: f64,
    pub t_end: f64,
    pub snapshot_dt: f64,
    pub target: MalaTargetKind,
    /// Bridge refinements per SDE step before falling back to reflection.
    pub max_halvings: u32,
    /// Per-coordinate SDE drift cap in units of `sqrt(dt)`; absent means plain Euler–Maruyama.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift_cap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnsembleConfig {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub master_seed: u64,
    /// Independent ensembles of `M` replicas each; distances are averaged over them.
    pub groups: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    Equilibrium,
    Gaussian,
    Uniform,
}

/// A one-dimensional density: a base shape times `e^{tilt} (1 + split tanh(x / width))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityConfig {
    pub kind: DensityKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    pub tilt_linear: f64,
    pub tilt_quadratic: f64,
    pub split: f64,
    pub width: f64,
}

impl DensityConfig {
    pub fn equilibrium() -> Self {
        Self {
            kind: DensityKind::Equilibrium,
            mean: None,
            var: None,
            lo: None,
            hi: None,
            tilt_linear: 0.0,
            tilt_quadratic: 0.0,
            split: 0.0,
            width: 1.0,
        }
    }

    /// Builds the density on `grid`; `mu_beta` backs the `equilibrium` kind.
    pub fn build(&self, grid: Grid1D, mu_beta: &GridDensity) -> chaoslab::Result<GridDensity> {
        let base = match self.kind {
            DensityKind::Equilibrium => mu_beta.clone(),
            DensityKind::Gaussian => GridDensity::gaussian(grid, self.mean.unwrap_or(0.0), self.var.unwrap_or(1.0))?,
            DensityKind::Uniform => GridDensity::uniform(grid, self.lo.unwrap_or(-1.0), self.hi.unwrap_or(1.0))?,
        };
        if self.tilt_linear == 0.0 && self.tilt_quadratic == 0.0 && self.split == 0.0 {
            return Ok(base);
        }
        let values = base
            .values()
            .iter()
            .enumerate()
            .map(|(k, &m)| {
                let x = grid.center(k);
                let shape = (1.0 + self.split * (x / self.width).tanh()).max(0.0);
                m * (self.tilt_linear * x + self.tilt_quadratic * x * x).exp() * shape
            })
            .collect();
        GridDensity::from_unnormalized(grid, values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Product,
    Mixture,
    ModulatedGibbs,
    Gibbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InitialConfig {
    /// Initial mean-field density `μ⁰`.
    pub mu: DensityConfig,
    /// Initial joint law of the tensor-grid solver.
    pub joint: JointKind,
    /// Product factor (default `mu`) or first mixture component.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<DensityConfig>,
    /// Second mixture component.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<DensityConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConstantsConfig {
    pub c_riesz: f64,
    pub c_re: f64,
    pub c_me: f64,
    pub c_beta_assm: f64,
}

impl From<ConstantsConfig> for TheoryConstants {
    fn from(c: ConstantsConfig) -> Self {
        TheoryConstants { c_riesz: c.c_riesz, c_re: c.c_re, c_me: c.c_me, c_beta_assm: c.c_beta_assm }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    /// `tol_disc = c_disc (h² + dt)` for the dissipation inequality.
    pub c_disc: f64,
    pub gronwall: f64,
    pub lsi: f64,
    /// Fixed-point residual target of the equilibrium solver.
    pub equilibrium: f64,
    /// Allowed increase of the mean-field free energy between snapshots.
    pub monotone: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplingConfig {
    /// Importance samples per partition estimate.
    pub is_samples: usize,
    pub chains: usize,
    /// Retained states per chain.
    pub chain_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub mala_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub beta: f64,
    pub output_dir: String,
    pub kernel: KernelConfig,
    pub confinement: ConfinementConfig,
    pub grid: GridConfig,
    pub dynamics: DynamicsConfig,
    pub ensemble: EnsembleConfig,
    pub initial: InitialConfig,
    pub constants: ConstantsConfig,
    pub tolerances: Tolerances,
    pub sampling: SamplingConfig,
}

impl ExperimentConfig {
    pub fn kernel_spec(&self) -> chaoslab::Result<KernelSpec> {
        self.kernel.spec()
    }

    pub fn confinement_spec(&self) -> chaoslab::Result<ConfinementSpec> {
        match self.confinement {
            ConfinementConfig::Quadratic { kappa } => ConfinementSpec::quadratic(kappa, self.kernel.d),
            ConfinementConfig::Quartic { a, b } => ConfinementSpec::quartic(a, b, self.kernel.d),
        }
    }

    pub fn grid(&self) -> chaoslab::Result<Grid1D> {
        Grid1D::new(self.grid.lo, self.grid.hi, self.grid.n_cells)
    }

    pub fn theory_constants(&self) -> TheoryConstants {
        self.constants.into()
    }

    /// `c_disc (h² + dt)`.
    pub fn tol_disc(&self) -> f64 {
        let h = (self.grid.hi - self.grid.lo) / self.grid.n_cells as f64;
        self.tolerances.c_disc * (h * h + self.dynamics.dt)
    }

    /// Canonical TOML text; parsing it gives back the same configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

struct Walker {
    errors: Vec<ConfigError>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a float",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

impl Walker {
    fn err(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.errors.push(ConfigError { path: path.into(), message: message.into() });
    }

    fn unknown(&mut self, t: &Table, path: &str, allowed: &[&str]) {
        let allowed: BTreeSet<&str> = allowed.iter().copied().collect();
        for key in t.keys() {
            if !allowed.contains(key.as_str()) {
                self.err(join(path, key), "unknown key");
            }
        }
    }

    fn f64(&mut self, t: &Table, path: &str, key: &str) -> Option<f64> {
        match t.get(key)? {
            Value::Float(x) => Some(*x),
            Value::Integer(i) => Some(*i as f64),
            other => {
                self.err(join(path, key), format!("expected a number, found {}", type_name(other)));
                None
            }
        }
    }

    fn u64(&mut self, t: &Table, path: &str, key: &str) -> Option<u64> {
        match t.get(key)? {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            Value::Integer(i) => {
                self.err(join(path, key), format!("expected a nonnegative integer, found {i}"));
                None
            }
            other => {
                self.err(join(path, key), format!("expected an integer, found {}", type_name(other)));
                None
            }
        }
    }

    fn usize(&mut self, t: &Table, path: &str, key: &str) -> Option<usize> {
        self.u64(t, path, key).map(|v| v as usize)
    }

    fn str<'t>(&mut self, t: &'t Table, path: &str, key: &str) -> Option<&'t str> {
        match t.get(key)? {
            Value::String(s) => Some(s),
            other => {
                self.err(join(path, key), format!("expected a string, found {}", type_name(other)));
                None
            }
        }
    }

    fn table<'t>(&mut self, t: &'t Table, path: &str, key: &str) -> Option<&'t Table> {
        match t.get(key)? {
            Value::Table(s) => Some(s),
            other => {
                self.err(join(path, key), format!("expected a table, found {}", type_name(other)));
                None
            }
        }
    }

    fn choice<T: Copy>(&mut self, t: &Table, path: &str, key: &str, options: &[(&str, T)]) -> Option<T> {
        let s = self.str(t, path, key)?;
        match options.iter().find(|(name, _)| *name == s) {
            Some((_, v)) => Some(*v),
            None => {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                self.err(join(path, key), format!("unknown value '{s}', expected one of {}", names.join(", ")));
                None
            }
        }
    }

    /// A number that must satisfy `ok`; reports `requirement` otherwise.
    fn checked(&mut self, t: &Table, path: &str, key: &str, ok: impl Fn(f64) -> bool, requirement: &str) -> Option<f64> {
        let v = self.f64(t, path, key)?;
        if ok(v) {
            Some(v)
        } else {
            self.err(join(path, key), format!("{requirement}, got {v}"));
            None
        }
    }

    fn positive(&mut self, t: &Table, path: &str, key: &str) -> Option<f64> {
        self.checked(t, path, key, |v| v > 0.0 && v.is_finite(), "must be positive and finite")
    }

    fn kernel(&mut self, t: &Table) -> Option<KernelConfig> {
        let p = "kernel";
        self.unknown(t, p, &["family", "s", "omega", "c", "d"]);
        let family = match t.get("family") {
            None => {
                self.err("kernel.family", "missing required key");
                None
            }
            Some(_) => self.choice(
                t,
                p,
                "family",
                &[
                    ("log", KernelKind::Log),
                    ("riesz", KernelKind::Riesz),
                    ("gaussian", KernelKind::Gaussian),
                    ("cosine", KernelKind::Cosine),
                    ("constant", KernelKind::Constant),
                    ("zero", KernelKind::Zero),
                ],
            ),
        };
        let d = match self.usize(t, p, "d") {
            Some(d) if (1..=3).contains(&d) => Some(d),
            Some(d) => {
                self.err("kernel.d", format!("dimension must be 1, 2 or 3, got {d}"));
                None
            }
            None if t.contains_key("d") => None,
            None => Some(1),
        };
        let s = self.f64(t, p, "s");
        let omega = self.f64(t, p, "omega");
        let c = self.f64(t, p, "c");
        let family = family?;
        let needs = |kind: KernelKind, key: &str| {
            matches!((kind, key), (KernelKind::Riesz, "s") | (KernelKind::Cosine, "omega") | (KernelKind::Constant, "c"))
        };
        for (key, present) in [("s", s.is_some()), ("omega", omega.is_some()), ("c", c.is_some())] {
            if present && !needs(family, key) {
                self.err(join(p, key), "not used by this kernel family");
            } else if !t.contains_key(key) && needs(family, key) {
                self.err(join(p, key), "missing required key for this kernel family");
            }
        }
        let d = d?;
        if family == KernelKind::Riesz {
            if let Some(s) = s {
                if !(s > 0.0 && s < d as f64) {
                    self.err("kernel.s", format!("riesz exponent must satisfy 0 < s < d = {d}, got {s}"));
                    return None;
                }
            }
        }
        if let Some(w) = omega.filter(|w| !w.is_finite()) {
            self.err("kernel.omega", format!("must be finite, got {w}"));
            return None;
        }
        Some(KernelConfig {
            family,
            s: s.filter(|_| needs(family, "s")),
            omega: omega.filter(|_| needs(family, "omega")),
            c: c.filter(|_| needs(family, "c")),
            d,
        })
    }

    fn confinement(&mut self, t: &Table) -> Option<ConfinementConfig> {
        let p = "confinement";
        let form = match t.get("form") {
            None => "quadratic",
            Some(_) => self.str(t, p, "form")?,
        };
        match form {
            "quadratic" => {
                self.unknown(t, p, &["form", "kappa"]);
                let kappa = if t.contains_key("kappa") { self.positive(t, p, "kappa")? } else { 2.0 };
                Some(ConfinementConfig::Quadratic { kappa })
            }
            "quartic" => {
                self.unknown(t, p, &["form", "a", "b"]);
                let a = self.checked(t, p, "a", |v| v >= 0.0 && v.is_finite(), "must be nonnegative");
                let b = self.checked(t, p, "b", |v| v.is_finite(), "must be finite");
                for key in ["a", "b"] {
                    if !t.contains_key(key) {
                        self.err(join(p, key), "missing required key for the quartic form");
                    }
                }
                let (a, b) = (a?, b?);
                if !(a > 0.0 || b > 0.0) {
                    self.err("confinement.a", "a quartic confinement needs a > 0, or a = 0 and b > 0");
                    return None;
                }
                Some(ConfinementConfig::Quartic { a, b })
            }
            other => {
                self.err("confinement.form", format!("unknown value '{other}', expected one of quadratic, quartic"));
                None
            }
        }
    }

    fn grid(&mut self, t: &Table, d: &GridConfig) -> Option<GridConfig> {
        let p = "grid";
        self.unknown(t, p, &["lo", "hi", "n_cells"]);
        let lo = if t.contains_key("lo") { self.checked(t, p, "lo", f64::is_finite, "must be finite") } else { Some(d.lo) };
        let hi = if t.contains_key("hi") { self.checked(t, p, "hi", f64::is_finite, "must be finite") } else { Some(d.hi) };
        let n_cells = match self.usize(t, p, "n_cells") {
            Some(n) if n >= 16 => Some(n),
            Some(n) => {
                self.err("grid.n_cells", format!("need at least 16 cells, got {n}"));
                None
            }
            None if t.contains_key("n_cells") => None,
            None => Some(d.n_cells),
        };
        let (lo, hi, n_cells) = (lo?, hi?, n_cells?);
        if lo >= hi {
            self.err("grid.hi", format!("must exceed grid.lo = {lo}, got {hi}"));
            return None;
        }
        Some(GridConfig { lo, hi, n_cells })
    }

    fn dynamics(&mut self, t: &Table, d: &DynamicsConfig) -> Option<DynamicsConfig> {
        let p = "dynamics";
        self.unknown(t, p, &["kind", "dt", "t_end", "snapshot_dt", "target", "max_halvings", "drift_cap"]);
        let kind = if t.contains_key("kind") {
            self.choice(
                t,
                p,
                "kind",
                &[
                    ("explicit", DynamicsKind::Explicit),
                    ("semi_implicit", DynamicsKind::SemiImplicit),
                    ("sde", DynamicsKind::Sde),
                    ("mala", DynamicsKind::Mala),
                ],
            )
        } else {
            Some(d.kind)
        };
        let target = if t.contains_key("target") {
            self.choice(t, p, "target", &[("gibbs", MalaTargetKind::Gibbs), ("modulated", MalaTargetKind::Modulated)])
        } else {
            Some(d.target)
        };
        let mut num = |key: &str, default: f64| if t.contains_key(key) { self.positive(t, p, key) } else { Some(default) };
        let dt = num("dt", d.dt);
        let t_end = num("t_end", d.t_end);
        let snapshot_dt = num("snapshot_dt", d.snapshot_dt);
        let drift_cap = if t.contains_key("drift_cap") { self.positive(t, p, "drift_cap").map(Some) } else { Some(d.drift_cap) };
        let max_halvings = match self.usize(t, p, "max_halvings") {
            Some(h) if h <= chaoslab::particles::MAX_HALVINGS as usize => Some(h as u32),
            Some(h) => {
                let max = chaoslab::particles::MAX_HALVINGS;
                self.err("dynamics.max_halvings", format!("must be at most {max}, got {h}"));
                None
            }
            None if t.contains_key("max_halvings") => None,
            None => Some(d.max_halvings),
        };
        let (dt, t_end, snapshot_dt) = (dt?, t_end?, snapshot_dt?);
        if dt > t_end {
            self.err("dynamics.dt", format!("time step {dt} exceeds t_end = {t_end}"));
            return None;
        }
        Some(DynamicsConfig {
            kind: kind?,
            dt,
            t_end,
            snapshot_dt,
            target: target?,
            max_halvings: max_halvings?,
            drift_cap: drift_cap?,
        })
    }

    fn ensemble(&mut self, t: &Table, d: &EnsembleConfig) -> Option<EnsembleConfig> {
        let p = "ensemble";
        self.unknown(t, p, &["N", "M", "master_seed", "groups"]);
        let n = match self.usize(t, p, "N") {
            Some(n) if (2..=4096).contains(&n) => Some(n),
            Some(n) => {
                self.err("ensemble.N", format!("particle number must lie in [2, 4096], got {n}"));
                None
            }
            None if t.contains_key("N") => None,
            None => Some(d.n),
        };
        let m = match self.usize(t, p, "M") {
            Some(0) => {
                self.err("ensemble.M", "need at least one replica");
                None
            }
            Some(m) => Some(m),
            None if t.contains_key("M") => None,
            None => Some(d.m),
        };
        let seed = match self.u64(t, p, "master_seed") {
            Some(s) => Some(s),
            None if t.contains_key("master_seed") => None,
            None => Some(d.master_seed),
        };
        let groups = match self.usize(t, p, "groups") {
            Some(0) => {
                self.err("ensemble.groups", "need at least one group");
                None
            }
            Some(g) => Some(g),
            None if t.contains_key("groups") => None,
            None => Some(d.groups),
        };
        Some(EnsembleConfig { n: n?, m: m?, master_seed: seed?, groups: groups? })
    }

    fn density(&mut self, t: &Table, p: &str) -> Option<DensityConfig> {
        self.unknown(t, p, &["kind", "mean", "var", "lo", "hi", "tilt_linear", "tilt_quadratic", "split", "width"]);
        let kind = if t.contains_key("kind") {
            self.choice(
                t,
                p,
                "kind",
                &[("equilibrium", DensityKind::Equilibrium), ("gaussian", DensityKind::Gaussian), ("uniform", DensityKind::Uniform)],
            )
        } else {
            Some(DensityKind::Equilibrium)
        };
        let mean = self.checked(t, p, "mean", f64::is_finite, "must be finite");
        let var = if t.contains_key("var") { self.positive(t, p, "var") } else { None };
        let lo = self.checked(t, p, "lo", f64::is_finite, "must be finite");
        let hi = self.checked(t, p, "hi", f64::is_finite, "must be finite");
        let tilt_linear = self.checked(t, p, "tilt_linear", f64::is_finite, "must be finite").unwrap_or(0.0);
        let tilt_quadratic = self.checked(t, p, "tilt_quadratic", f64::is_finite, "must be finite").unwrap_or(0.0);
        let split = self.checked(t, p, "split", |v| v.abs() <= 1.0, "must lie in [-1, 1]").unwrap_or(0.0);
        let width = if t.contains_key("width") { self.positive(t, p, "width")? } else { 1.0 };
        let kind = kind?;
        let allowed: &[&str] = match kind {
            DensityKind::Equilibrium => &[],
            DensityKind::Gaussian => &["mean", "var"],
            DensityKind::Uniform => &["lo", "hi"],
        };
        for key in ["mean", "var", "lo", "hi"] {
            if t.contains_key(key) && !allowed.contains(&key) {
                self.err(join(p, key), "not used by this density kind");
            }
        }
        if kind == DensityKind::Uniform {
            if let (Some(a), Some(b)) = (lo, hi) {
                if a >= b {
                    self.err(join(p, "hi"), format!("must exceed lo = {a}, got {b}"));
                    return None;
                }
            }
        }
        Some(DensityConfig {
            kind,
            mean: if kind == DensityKind::Gaussian { Some(mean.unwrap_or(0.0)) } else { None },
            var: if kind == DensityKind::Gaussian { Some(var.unwrap_or(1.0)) } else { None },
            lo: if kind == DensityKind::Uniform { Some(lo.unwrap_or(-1.0)) } else { None },
            hi: if kind == DensityKind::Uniform { Some(hi.unwrap_or(1.0)) } else { None },
            tilt_linear,
            tilt_quadratic,
            split,
            width,
        })
    }

    fn initial(&mut self, t: &Table) -> Option<InitialConfig> {
        let p = "initial";
        self.unknown(t, p, &["mu", "joint", "a", "b"]);
        let sub = |w: &mut Self, key: &str| -> Option<Option<DensityConfig>> {
            match w.table(t, p, key) {
                Some(s) => w.density(s, &join(p, key)).map(Some),
                None if t.contains_key(key) => None,
                None => Some(None),
            }
        };
        let mu = sub(self, "mu");
        let a = sub(self, "a");
        let b = sub(self, "b");
        let joint = if t.contains_key("joint") {
            self.choice(
                t,
                p,
                "joint",
                &[
                    ("product", JointKind::Product),
                    ("mixture", JointKind::Mixture),
                    ("modulated_gibbs", JointKind::ModulatedGibbs),
                    ("gibbs", JointKind::Gibbs),
                ],
            )
        } else {
            Some(JointKind::Product)
        };
        let (mu, a, b, joint) = (mu?, a?, b?, joint?);
        if joint == JointKind::Mixture {
            for (key, v) in [("a", a.is_some()), ("b", b.is_some())] {
                if !v {
                    self.err(join(p, key), "a mixture needs both components a and b");
                }
            }
            if a.is_none() || b.is_none() {
                return None;
            }
        } else if b.is_some() {
            self.err("initial.b", "only used by the mixture joint law");
            return None;
        }
        Some(InitialConfig { mu: mu.unwrap_or_else(DensityConfig::equilibrium), joint, a, b })
    }

    fn constants(&mut self, t: &Table, beta: Option<f64>, d: &ConstantsConfig) -> Option<ConstantsConfig> {
        let p = "constants";
        self.unknown(t, p, &["c_riesz", "c_re", "c_me", "c_beta_assm"]);
        let get = |w: &mut Self, key: &str, default: f64, ok: fn(f64) -> bool, req: &str| {
            if t.contains_key(key) {
                w.checked(t, p, key, ok, req)
            } else {
                Some(default)
            }
        };
        let c_riesz = get(self, "c_riesz", d.c_riesz, |v| v > 0.0 && v.is_finite(), "must be positive");
        let c_re = get(self, "c_re", d.c_re, |v| v >= 0.0 && v.is_finite(), "must be nonnegative");
        let c_me = get(self, "c_me", d.c_me, |v| v >= 0.0 && v.is_finite(), "must be nonnegative");
        let c_beta_assm = get(self, "c_beta_assm", d.c_beta_assm, |v| v >= 0.0, "must be nonnegative");
        if let (Some(c), Some(beta)) = (c_beta_assm, beta) {
            if c * beta >= 1.0 {
                self.err("constants.c_beta_assm", format!("must be below 1/beta = {}, got {c}", 1.0 / beta));
                return None;
            }
        }
        Some(ConstantsConfig { c_riesz: c_riesz?, c_re: c_re?, c_me: c_me?, c_beta_assm: c_beta_assm? })
    }

    fn tolerances(&mut self, t: &Table, d: &Tolerances) -> Option<Tolerances> {
        let p = "tolerances";
        self.unknown(t, p, &["c_disc", "gronwall", "lsi", "equilibrium", "monotone"]);
        let mut get = |key: &str, default: f64| {
            if t.contains_key(key) {
                self.checked(t, p, key, |v| v >= 0.0 && v.is_finite(), "must be nonnegative and finite")
            } else {
                Some(default)
            }
        };
        let c_disc = get("c_disc", d.c_disc);
        let gronwall = get("gronwall", d.gronwall);
        let lsi = get("lsi", d.lsi);
        let equilibrium = get("equilibrium", d.equilibrium);
        let monotone = get("monotone", d.monotone);
        Some(Tolerances { c_disc: c_disc?, gronwall: gronwall?, lsi: lsi?, equilibrium: equilibrium?, monotone: monotone? })
    }

    fn sampling(&mut self, t: &Table, d: &SamplingConfig) -> Option<SamplingConfig> {
        let p = "sampling";
        self.unknown(t, p, &["is_samples", "chains", "chain_samples", "burn_in", "thin", "mala_dt"]);
        let mut count = |key: &str, default: usize, min: usize| match self.usize(t, p, key) {
            Some(v) if v >= min => Some(v),
            Some(v) => {
                self.err(join(p, key), format!("must be at least {min}, got {v}"));
                None
            }
            None if t.contains_key(key) => None,
            None => Some(default),
        };
        let is_samples = count("is_samples", d.is_samples, 2);
        let chains = count("chains", d.chains, 1);
        let chain_samples = count("chain_samples", d.chain_samples, 1);
        let burn_in = count("burn_in", d.burn_in, 0);
        let thin = count("thin", d.thin, 1);
        let mala_dt = if t.contains_key("mala_dt") { self.positive(t, p, "mala_dt") } else { Some(d.mala_dt) };
        Some(SamplingConfig {
            is_samples: is_samples?,
            chains: chains?,
            chain_samples: chain_samples?,
            burn_in: burn_in?,
            thin: thin?,
            mala_dt: mala_dt?,
        })
    }
}

pub const DEFAULT_GRID: GridConfig = GridConfig { lo: -6.0, hi: 6.0, n_cells: 256 };
pub const DEFAULT_DYNAMICS: DynamicsConfig = DynamicsConfig {
    kind: DynamicsKind::SemiImplicit,
    dt: 0.005,
    t_end: 1.0,
    snapshot_dt: 0.1,
    target: MalaTargetKind::Gibbs,
    max_halvings: chaoslab::particles::MAX_HALVINGS,
    drift_cap: None,
};
pub const DEFAULT_ENSEMBLE: EnsembleConfig = EnsembleConfig { n: 2, m: 64, master_seed: 0, groups: 1 };
pub const DEFAULT_CONSTANTS: ConstantsConfig = ConstantsConfig { c_riesz: 1.0, c_re: 1.0, c_me: 1.0, c_beta_assm: 0.0 };
pub const DEFAULT_TOLERANCES: Tolerances =
    Tolerances { c_disc: 2.0, gronwall: 1e-10, lsi: 1e-12, equilibrium: 1e-10, monotone: 1e-12 };
pub const DEFAULT_SAMPLING: SamplingConfig =
    SamplingConfig { is_samples: 100_000, chains: 10, chain_samples: 10_000, burn_in: 2000, thin: 5, mala_dt: 0.05 };

/// Parses and validates a configuration, collecting every error.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| {
        ConfigErrors(vec![ConfigError { path: String::new(), message: format!("malformed TOML: {}", e.message()) }])
    })?;
    let mut w = Walker { errors: Vec::new() };
    w.unknown(
        &root,
        "",
        &[
            "beta",
            "output_dir",
            "kernel",
            "confinement",
            "grid",
            "dynamics",
            "ensemble",
            "initial",
            "constants",
            "tolerances",
            "sampling",
        ],
    );
    let empty = Table::new();
    let beta = if root.contains_key("beta") {
        w.positive(&root, "", "beta")
    } else {
        w.err("beta", "missing required key");
        None
    };
    let output_dir = match root.get("output_dir") {
        Some(_) => w.str(&root, "", "output_dir").map(str::to_string),
        None => Some("out".to_string()),
    };
    let kernel = match w.table(&root, "", "kernel") {
        Some(t) => w.kernel(t),
        None if root.contains_key("kernel") => None,
        None => {
            w.err("kernel.family", "missing required key");
            None
        }
    };
    let section = |w: &mut Walker, key: &str| -> Option<&Table> {
        match w.table(&root, "", key) {
            Some(t) => Some(t),
            None if root.contains_key(key) => None,
            None => Some(&empty),
        }
    };
    let confinement = section(&mut w, "confinement").and_then(|t| w.confinement(t));
    let grid = section(&mut w, "grid").and_then(|t| w.grid(t, &DEFAULT_GRID));
    let dynamics = section(&mut w, "dynamics").and_then(|t| w.dynamics(t, &DEFAULT_DYNAMICS));
    let ensemble = section(&mut w, "ensemble").and_then(|t| w.ensemble(t, &DEFAULT_ENSEMBLE));
    let initial = section(&mut w, "initial").and_then(|t| w.initial(t));
    let constants = section(&mut w, "constants").and_then(|t| w.constants(t, beta, &DEFAULT_CONSTANTS));
    let tolerances = section(&mut w, "tolerances").and_then(|t| w.tolerances(t, &DEFAULT_TOLERANCES));
    let sampling = section(&mut w, "sampling").and_then(|t| w.sampling(t, &DEFAULT_SAMPLING));

    if !w.errors.is_empty() {
        return Err(ConfigErrors(w.errors));
    }
    let cfg = ExperimentConfig {
        beta: beta.unwrap(),
        output_dir: output_dir.unwrap(),
        kernel: kernel.unwrap(),
        confinement: confinement.unwrap(),
        grid: grid.unwrap(),
        dynamics: dynamics.unwrap(),
        ensemble: ensemble.unwrap(),
        initial: initial.unwrap(),
        constants: constants.unwrap(),
        tolerances: tolerances.unwrap(),
        sampling: sampling.unwrap(),
    };
    // Cross-checks against the library's own preconditions.
    if let Err(e) = cfg.kernel_spec() {
        w.err("kernel", e.to_string());
    }
    if let Err(e) = cfg.confinement_spec() {
        w.err("confinement", e.to_string());
    }
    if w.errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors(w.errors))
    }
}
