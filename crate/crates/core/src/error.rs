use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("rank deficient regressor (condition estimate {cond:.3e}); data lacks excitation")]
    RankDeficient { cond: f64 },

    #[error("matrix is singular or ill-conditioned (condition estimate {cond:.3e})")]
    Singular { cond: f64 },

    #[error("no principal square root: residual {residual:.3e} after {iterations} iterations")]
    NoPrincipalRoot { residual: f64, iterations: usize },

    #[error("simulation diverged at step {step} (state norm {norm:.3e})")]
    Diverged { step: usize, norm: f64 },

    #[error("channel {channel} has zero rms; noise scale defined as 0")]
    DegenerateChannel { channel: usize },

    #[error("no trajectory long enough to build triplets")]
    Empty,

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("small-noise assumption violated on {violations} of {draws} draws")]
    AssumptionViolated { violations: usize, draws: usize },

    #[error("io error: {0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
