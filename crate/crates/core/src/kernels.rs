//! Interaction kernels and confinement potentials.
//!
//! Every kernel here is translation invariant and radial, `g(x, y) = φ(|x - y|)`.
//! The one-dimensional antiderivatives used by the grid quadrature also live
//! here so that no kernel formula is duplicated elsewhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;

/// Bounded kernels that are continuous on the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SmoothKernel {
    /// `e^{-r^2}`, positive definite.
    Gaussian,
    /// `cos(ω r)`, positive semidefinite.
    Cosine { omega: f64 },
    /// A constant `c`.
    Constant(f64),
    /// The zero kernel (no interaction).
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelFamily {
    /// `-log |x - y|`.
    Log,
    /// `(1/s) |x - y|^{-s}` with `0 < s < d`.
    Riesz { s: f64 },
    Smooth(SmoothKernel),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    family: KernelFamily,
    dim: usize,
}

fn check_dim(dim: usize) -> Result<()> {
    if (1..=3).contains(&dim) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("dimension {dim} not in {{1, 2, 3}}")))
    }
}

impl KernelSpec {
    pub fn new(family: KernelFamily, dim: usize) -> Result<Self> {
        check_dim(dim)?;
        match family {
            KernelFamily::Riesz { s } if !(s > 0.0 && s < dim as f64) => Err(Error::InvalidInput(
                format!("riesz exponent s = {s} must satisfy 0 < s < d = {dim}"),
            )),
            KernelFamily::Smooth(SmoothKernel::Cosine { omega }) if !(omega.is_finite()) => {
                Err(Error::InvalidInput("cosine frequency must be finite".into()))
            }
            KernelFamily::Smooth(SmoothKernel::Constant(c)) if !c.is_finite() => {
                Err(Error::InvalidInput("constant kernel must be finite".into()))
            }
            _ => Ok(Self { family, dim }),
        }
    }

    pub fn log(dim: usize) -> Result<Self> {
        Self::new(KernelFamily::Log, dim)
    }

    pub fn riesz(s: f64, dim: usize) -> Result<Self> {
        Self::new(KernelFamily::Riesz { s }, dim)
    }

    pub fn smooth(kernel: SmoothKernel, dim: usize) -> Result<Self> {
        Self::new(KernelFamily::Smooth(kernel), dim)
    }

    pub fn zero(dim: usize) -> Result<Self> {
        Self::smooth(SmoothKernel::Zero, dim)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Riesz exponent, with 0 for the log kernel and `None` for smooth kernels.
    pub fn riesz_exponent(&self) -> Option<f64> {
        match self.family {
            KernelFamily::Log => Some(0.0),
            KernelFamily::Riesz { s } => Some(s),
            KernelFamily::Smooth(_) => None,
        }
    }

    pub fn is_singular(&self) -> bool {
        !matches!(self.family, KernelFamily::Smooth(_))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.family, KernelFamily::Smooth(SmoothKernel::Zero))
    }

    /// Radial profile `φ(r)`, `r >= 0`. Singular families return `+∞` at 0.
    #[inline]
    pub fn radial(&self, r: f64) -> f64 {
        match self.family {
            KernelFamily::Log => {
                if r == 0.0 {
                    f64::INFINITY
                } else {
                    -r.ln()
                }
            }
            KernelFamily::Riesz { s } => {
                if r == 0.0 {
                    f64::INFINITY
                } else {
                    r.powf(-s) / s
                }
            }
            KernelFamily::Smooth(k) => match k {
                SmoothKernel::Gaussian => (-r * r).exp(),
                SmoothKernel::Cosine { omega } => (omega * r).cos(),
                SmoothKernel::Constant(c) => c,
                SmoothKernel::Zero => 0.0,
            },
        }
    }

    /// Radial derivative `φ'(r)` for `r > 0`.
    #[inline]
    pub fn radial_derivative(&self, r: f64) -> f64 {
        match self.family {
            KernelFamily::Log => -1.0 / r,
            KernelFamily::Riesz { s } => -r.powf(-s - 1.0),
            KernelFamily::Smooth(k) => match k {
                SmoothKernel::Gaussian => -2.0 * r * (-r * r).exp(),
                SmoothKernel::Cosine { omega } => -omega * (omega * r).sin(),
                SmoothKernel::Constant(_) | SmoothKernel::Zero => 0.0,
            },
        }
    }

    /// `g(x, y)`; `+∞` on the diagonal for singular families.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.radial(distance(x, y))
    }

    /// Gradient of `g` in its first argument.
    pub fn grad(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let r = distance(x, y);
        if r == 0.0 {
            if self.is_singular() {
                return Err(Error::Domain("kernel gradient on the diagonal".into()));
            }
            return Ok(vec![0.0; x.len()]);
        }
        let scale = self.radial_derivative(r) / r;
        Ok(x.iter().zip(y).map(|(a, b)| scale * (a - b)).collect())
    }

    /// Derivative of `z ↦ φ(|z|)` in one dimension; zero at `z = 0` for smooth kernels.
    #[inline]
    pub fn grad_1d(&self, z: f64) -> f64 {
        if z == 0.0 {
            return if self.is_singular() { f64::NAN } else { 0.0 };
        }
        self.radial_derivative(z.abs()) * z.signum()
    }

    /// One-dimensional `φ''(r)` for `r > 0`.
    pub fn second_derivative(&self, r: f64) -> Result<f64> {
        if self.dim != 1 {
            return Err(Error::Domain("second derivative is only exposed for d = 1".into()));
        }
        if !(r > 0.0) {
            return Err(Error::Domain(format!("second derivative needs r > 0, got {r}")));
        }
        Ok(match self.family {
            KernelFamily::Log => 1.0 / (r * r),
            KernelFamily::Riesz { s } => s * (s + 1.0) * r.powf(-s - 2.0),
            KernelFamily::Smooth(k) => match k {
                SmoothKernel::Gaussian => (4.0 * r * r - 2.0) * (-r * r).exp(),
                SmoothKernel::Cosine { omega } => -omega * omega * (omega * r).cos(),
                SmoothKernel::Constant(_) | SmoothKernel::Zero => 0.0,
            },
        })
    }

    /// Smallest `C` with `|g| <= C (1 + |log r|)` (log) or `C (1 + r^{-s})` (Riesz).
    pub fn growth_constant(&self) -> Option<f64> {
        match self.family {
            KernelFamily::Log => Some(1.0),
            KernelFamily::Riesz { s } => Some(1.0_f64.max(1.0 / s)),
            KernelFamily::Smooth(_) => None,
        }
    }

    /// Checks the growth bound with constant `c` at separation `r`.
    pub fn growth_bound_holds(&self, c: f64, r: f64) -> bool {
        let g = self.radial(r).abs();
        match self.family {
            KernelFamily::Log => g <= c * (1.0 + r.ln().abs()),
            KernelFamily::Riesz { s } => g <= c * (1.0 + r.powf(-s)),
            KernelFamily::Smooth(_) => g.is_finite(),
        }
    }

    fn require_1d_integrable(&self) -> Result<()> {
        if self.dim != 1 {
            return Err(Error::UnsupportedKernel(format!(
                "grid quadrature needs d = 1, kernel has d = {}",
                self.dim
            )));
        }
        if let KernelFamily::Riesz { s } = self.family {
            if s >= 1.0 {
                return Err(Error::UnsupportedKernel(format!(
                    "riesz s = {s} is not locally integrable in d = 1"
                )));
            }
        }
        Ok(())
    }

    /// Odd antiderivative `Φ(u) = ∫_0^u φ(|t|) dt` (d = 1).
    #[inline]
    pub fn antiderivative(&self, u: f64) -> f64 {
        let a = u.abs();
        let v = match self.family {
            KernelFamily::Log => {
                if a == 0.0 {
                    0.0
                } else {
                    a - a * a.ln()
                }
            }
            KernelFamily::Riesz { s } => a.powf(1.0 - s) / (s * (1.0 - s)),
            KernelFamily::Smooth(k) => match k {
                SmoothKernel::Gaussian => 0.5 * std::f64::consts::PI.sqrt() * libm::erf(a),
                SmoothKernel::Cosine { omega } => {
                    if omega == 0.0 {
                        a
                    } else {
                        (omega * a).sin() / omega
                    }
                }
                SmoothKernel::Constant(c) => c * a,
                SmoothKernel::Zero => 0.0,
            },
        };
        if u < 0.0 {
            -v
        } else {
            v
        }
    }

    /// Even second antiderivative `Ψ(u) = ∫_0^u Φ(t) dt` (d = 1).
    #[inline]
    pub fn second_antiderivative(&self, u: f64) -> f64 {
        let a = u.abs();
        match self.family {
            KernelFamily::Log => {
                if a == 0.0 {
                    0.0
                } else {
                    0.75 * a * a - 0.5 * a * a * a.ln()
                }
            }
            KernelFamily::Riesz { s } => a.powf(2.0 - s) / (s * (1.0 - s) * (2.0 - s)),
            KernelFamily::Smooth(k) => match k {
                SmoothKernel::Gaussian => {
                    0.5 * std::f64::consts::PI.sqrt() * a * libm::erf(a) + 0.5 * (-a * a).exp()
                        - 0.5
                }
                SmoothKernel::Cosine { omega } => {
                    if omega == 0.0 {
                        0.5 * a * a
                    } else {
                        // 1 - cos(x) = 2 sin^2(x/2), stable for small arguments
                        2.0 * (0.5 * omega * a).sin().powi(2) / (omega * omega)
                    }
                }
                SmoothKernel::Constant(c) => 0.5 * c * a * a,
                SmoothKernel::Zero => 0.0,
            },
        }
    }

    /// Even first moment `∫_0^{|u|} t φ(t) dt` (d = 1).
    pub fn radial_moment(&self, u: f64) -> f64 {
        let a = u.abs();
        if a == 0.0 {
            return 0.0;
        }
        match self.family {
            KernelFamily::Log => a * a * (0.25 - 0.5 * a.ln()),
            KernelFamily::Riesz { s } => a.powf(2.0 - s) / (s * (2.0 - s)),
            KernelFamily::Smooth(k) => match k {
                SmoothKernel::Gaussian => -0.5 * (-a * a).exp_m1(),
                SmoothKernel::Cosine { omega } => {
                    if omega == 0.0 {
                        0.5 * a * a
                    } else {
                        a * (omega * a).sin() / omega
                            - 2.0 * (0.5 * omega * a).sin().powi(2) / (omega * omega)
                    }
                }
                SmoothKernel::Constant(c) => 0.5 * c * a * a,
                SmoothKernel::Zero => 0.0,
            },
        }
    }

    /// `∫_0^r t φ'(t) dt = r φ(r) - Φ(r)` for `r >= 0`.
    pub fn virial_antiderivative(&self, r: f64) -> f64 {
        if r == 0.0 {
            return 0.0;
        }
        match self.family {
            KernelFamily::Log => -r,
            KernelFamily::Riesz { s } => -r.powf(1.0 - s) / (1.0 - s),
            KernelFamily::Smooth(_) => r * self.radial(r) - self.antiderivative(r),
        }
    }

    /// `∫∫ φ(|x - y|)` over two cells of width `h` whose left edges differ by `m h`.
    pub fn cell_pair_integral(&self, m: usize, h: f64) -> Result<f64> {
        self.require_1d_integrable()?;
        Ok(self.cell_pair_integral_unchecked(m, h, &quad::gauss_legendre(16)))
    }

    pub(crate) fn cell_pair_integral_unchecked(
        &self,
        m: usize,
        h: f64,
        rule: &(Vec<f64>, Vec<f64>),
    ) -> f64 {
        if m <= 1 {
            let mf = m as f64;
            let psi = |u: f64| self.second_antiderivative(u);
            return psi((mf + 1.0) * h) - 2.0 * psi(mf * h) + psi((mf - 1.0) * h);
        }
        // Away from the diagonal the second difference cancels badly; integrate
        // the triangle-weighted profile instead.
        let mh = m as f64 * h;
        let left = quad::integrate(rule, -h, 0.0, |v| (h + v) * self.radial(mh + v));
        let right = quad::integrate(rule, 0.0, h, |v| (h - v) * self.radial(mh + v));
        left + right
    }

    /// `∫_{cell} φ(|x_c - y|) dy` for a cell whose center is `m h` away from `x_c`.
    pub fn cell_point_integral(&self, m: usize, h: f64) -> f64 {
        let mf = m as f64;
        self.antiderivative((mf + 0.5) * h) - self.antiderivative((mf - 0.5) * h)
    }

    /// Average of `r φ'(r)` over a cell × cell square of width `h`, `r = |x - y|`.
    pub fn virial_cell_average(&self, h: f64) -> f64 {
        match self.family {
            KernelFamily::Log => -1.0,
            KernelFamily::Riesz { s } => -2.0 * h.powf(-s) / ((1.0 - s) * (2.0 - s)),
            KernelFamily::Smooth(_) => {
                let rule = quad::gauss_legendre(16);
                2.0 / (h * h)
                    * quad::integrate(&rule, 0.0, h, |r| (h - r) * r * self.radial_derivative(r))
            }
        }
    }
}

#[inline]
fn distance(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    if x.len() == 1 {
        return (x[0] - y[0]).abs();
    }
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Natural cubic spline through `(xs, ys)`, extended linearly outside the knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        let n = xs.len();
        if n < 3 || ys.len() != n {
            return Err(Error::InvalidInput("spline needs at least 3 matching knots".into()));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) || ys.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidInput("spline knots must be increasing and finite".into()));
        }
        // Tridiagonal system for the second derivatives, natural ends.
        let mut m = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        for i in 1..n - 1 {
            let h0 = xs[i] - xs[i - 1];
            let h1 = xs[i + 1] - xs[i];
            let a = h0 / 6.0;
            let b = (h0 + h1) / 3.0;
            let cc = h1 / 6.0;
            let rhs = (ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0;
            let denom = b - a * c[i - 1];
            c[i] = cc / denom;
            d[i] = (rhs - a * d[i - 1]) / denom;
        }
        for i in (1..n - 1).rev() {
            m[i] = d[i] - c[i] * m[i + 1];
        }
        Ok(Self { xs, ys, m })
    }

    fn segment(&self, x: f64) -> usize {
        match self.xs.partition_point(|&k| k <= x) {
            0 => 0,
            i => (i - 1).min(self.xs.len() - 2),
        }
    }

    /// Value, first and second derivative.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let n = self.xs.len();
        if x < self.xs[0] || x > self.xs[n - 1] {
            let edge = if x < self.xs[0] { self.xs[0] } else { self.xs[n - 1] };
            let (v, d1, _) = self.eval(edge);
            return (v + d1 * (x - edge), d1, 0.0);
        }
        let i = self.segment(x);
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let v = a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let d1 = (self.ys[i + 1] - self.ys[i]) / h - (3.0 * a * a - 1.0) * h * m0 / 6.0
            + (3.0 * b * b - 1.0) * h * m1 / 6.0;
        let d2 = a * m0 + b * m1;
        (v, d1, d2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConfinementForm {
    /// `κ |x|^2 / 2`.
    Quadratic { kappa: f64 },
    /// `a |x|^4 + b |x|^2`.
    Quartic { a: f64, b: f64 },
    /// One-dimensional tabulated potential.
    Table(CubicSpline),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfinementSpec {
    form: ConfinementForm,
    dim: usize,
}

impl ConfinementSpec {
    pub fn new(form: ConfinementForm, dim: usize) -> Result<Self> {
        check_dim(dim)?;
        match &form {
            ConfinementForm::Quadratic { kappa } if !(*kappa > 0.0 && kappa.is_finite()) => {
                Err(Error::InvalidInput(format!("quadratic confinement needs kappa > 0, got {kappa}")))
            }
            ConfinementForm::Table(_) if dim != 1 => {
                Err(Error::InvalidInput("tabulated confinement is one-dimensional".into()))
            }
            _ => Ok(Self { form, dim }),
        }
    }

    pub fn quadratic(kappa: f64, dim: usize) -> Result<Self> {
        Self::new(ConfinementForm::Quadratic { kappa }, dim)
    }

    pub fn quartic(a: f64, b: f64, dim: usize) -> Result<Self> {
        Self::new(ConfinementForm::Quartic { a, b }, dim)
    }

    pub fn form(&self) -> &ConfinementForm {
        &self.form
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Radial profile value, derivative and second derivative at radius `r`.
    fn radial(&self, r: f64) -> (f64, f64, f64) {
        match &self.form {
            ConfinementForm::Quadratic { kappa } => (0.5 * kappa * r * r, kappa * r, *kappa),
            ConfinementForm::Quartic { a, b } => (
                a * r.powi(4) + b * r * r,
                4.0 * a * r.powi(3) + 2.0 * b * r,
                12.0 * a * r * r + 2.0 * b,
            ),
            ConfinementForm::Table(s) => s.eval(r),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        if let ConfinementForm::Table(s) = &self.form {
            return s.eval(x[0]).0;
        }
        self.radial(norm(x)).0
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        if let ConfinementForm::Table(s) = &self.form {
            return vec![s.eval(x[0]).1];
        }
        match &self.form {
            ConfinementForm::Quadratic { kappa } => x.iter().map(|v| kappa * v).collect(),
            ConfinementForm::Quartic { a, b } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                x.iter().map(|v| (4.0 * a * r2 + 2.0 * b) * v).collect()
            }
            ConfinementForm::Table(_) => unreachable!(),
        }
    }

    /// Smallest Hessian eigenvalue (the second derivative in one dimension).
    pub fn hess(&self, x: &[f64]) -> f64 {
        if self.dim == 1 || matches!(self.form, ConfinementForm::Table(_)) {
            return self.second_1d(x[0]);
        }
        let r = norm(x);
        let (_, d1, d2) = self.radial(r);
        if r == 0.0 {
            return d2;
        }
        d2.min(d1 / r)
    }

    #[inline]
    pub fn value_1d(&self, x: f64) -> f64 {
        match &self.form {
            ConfinementForm::Table(s) => s.eval(x).0,
            _ => self.radial(x.abs()).0,
        }
    }

    #[inline]
    pub fn grad_1d(&self, x: f64) -> f64 {
        match &self.form {
            ConfinementForm::Quadratic { kappa } => kappa * x,
            ConfinementForm::Quartic { a, b } => 4.0 * a * x.powi(3) + 2.0 * b * x,
            ConfinementForm::Table(s) => s.eval(x).1,
        }
    }

    #[inline]
    pub fn second_1d(&self, x: f64) -> f64 {
        match &self.form {
            ConfinementForm::Table(s) => s.eval(x).2,
            _ => self.radial(x.abs()).2,
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
