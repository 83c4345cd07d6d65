use thiserror::Error;

/// Errors raised by the filtering, smoothing, calibration and baseline code.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid step size {0}: must be finite and positive")]
    InvalidStep(f64),

    #[error("invalid order q = {0}: supported range is 1..=5")]
    InvalidOrder(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("diffusion entries must be non-negative and finite, got {0}")]
    NegativeDiffusion(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered during {0}")]
    NonFinite(&'static str),

    #[error("innovation covariance is singular and the residual is inconsistent with it")]
    SingularInnovation,

    #[error("predicted covariance is singular on the interval ending at t = {0}")]
    DegenerateInterval(f64),

    #[error("no accepted steps contributed to the diffusion estimate")]
    NoData,

    #[error("time {t} outside of the solution range [{t0}, {t1}]")]
    OutOfRange { t: f64, t0: f64, t1: f64 },

    #[error("unknown problem '{name}'; available: {available}")]
    UnknownProblem { name: String, available: String },

    #[error("problem '{0}' has no analytic solution")]
    NoAnalyticSolution(String),

    #[error("problem '{0}' provides no valid initial value")]
    MissingInitialValue(String),

    #[error("step size fell below the minimum {h_min:e} at t = {t}")]
    MinStepSize { t: f64, h_min: f64 },

    #[error("attempted-step budget of {0} exhausted")]
    MaxSteps(usize),

    #[error("no reference solution available for '{0}': {1}")]
    ReferenceUnavailable(String, String),

    #[error("all covariances are singular; the chi-square statistic is undefined")]
    AllSingular,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
