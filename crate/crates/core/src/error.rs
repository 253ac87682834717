use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time {t} outside stored range [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("ODE step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("ODE integration exceeded {0} steps")]
    TooManySteps(usize),

    #[error("Newton iteration did not converge in {0} iterations")]
    NewtonNonConvergence(usize),

    #[error("Jacobian is not Hurwitz (largest real part of an eigenvalue is {0})")]
    NotHurwitz(f64),

    #[error("epsilon {eps} too large; largest admissible value is {max}")]
    EpsilonTooLarge { eps: f64, max: f64 },

    #[error("no admissible level radius found after {0} shrink steps")]
    NoAdmissibleRadius(usize),

    #[error("trajectory has no stored noise for index {0}")]
    MissingNoise(usize),

    #[error("stepsize threshold {threshold} not reached within index {horizon}")]
    ThresholdNotReached { threshold: f64, horizon: usize },

    #[error("horizon {horizon} too small: remainder bound {remainder} exceeds 1")]
    HorizonTooSmall { horizon: usize, remainder: f64 },

    #[error("no trial started inside the start set")]
    NoConditionedTrials,

    #[error("parameter mismatch: {0}")]
    ParameterMismatch(String),

    #[error("exponential moment diverges: delta {delta} must be below c2 = {c2}")]
    DivergentMoment { delta: f64, c2: f64 },

    #[error("horizon exhausted before index {0}")]
    HorizonExhausted(usize),

    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
