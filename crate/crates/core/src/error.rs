use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("support error: {0}")]
    Support(String),

    #[error("fixed point did not converge after {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("exponent overflow: {0}")]
    Overflow(String),

    #[error("time step {dt:e} violates the stability bound {limit:e}")]
    Cfl { dt: f64, limit: f64 },

    #[error("step failure in replica {replica}: {message}")]
    StepFailure { replica: usize, message: String },

    #[error("mixing failure: acceptance rate {rate:.4} over {steps} steps, try a smaller step size")]
    MixingFailure { rate: f64, steps: usize },

    #[error("unreliable estimate: effective sample size {ess:.1} < 30")]
    UnreliableEstimate { ess: f64 },

    #[error("insufficient samples: {got} < {needed}")]
    InsufficientSamples { got: usize, needed: usize },

    #[error("coincident points {i} and {j} for a singular kernel")]
    CoincidentPoints { i: usize, j: usize },

    #[error("joint density with {cells} cells exceeds the memory budget of {budget}")]
    MemoryBudget { cells: usize, budget: usize },

    #[error("no LSI certificate at t = {t}: kappa = {kappa}")]
    InvalidLsi { t: f64, kappa: f64 },

    #[error("absolute continuity violated: reference vanishes where the density has mass {mass:e}")]
    AbsoluteContinuity { mass: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of a numerical procedure (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::Overflow(_)
                | Error::StepFailure { .. }
                | Error::MixingFailure { .. }
                | Error::UnreliableEstimate { .. }
                | Error::InvalidLsi { .. }
                | Error::CoincidentPoints { .. }
        )
    }
}
