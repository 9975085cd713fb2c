use thiserror::Error;

/// Errors raised anywhere in the solver stack.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("step size underflow at t = {t}: required step {step:e} is below the minimum")]
    StepSizeUnderflow { t: f64, step: f64 },
    #[error("right-hand side produced a non-finite value at t = {t}")]
    NonFiniteRhs { t: f64 },
    #[error("integration exceeded {0} steps")]
    MaxStepsExceeded(usize),
    #[error("time {t} is outside the span [{start}, {end}]")]
    OutOfSpan { t: f64, start: f64, end: f64 },
    #[error("time {t} is outside the horizon [{start}, {end}]")]
    OutOfHorizon { t: f64, start: f64, end: f64 },
    #[error("invalid mode schedule: {0}")]
    InvalidSchedule(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite cost")]
    NonFiniteCost,
    #[error("non-finite Jacobian at t = {t}")]
    NonFiniteJacobian { t: f64 },
    #[error("non-finite derivative at t = {t}")]
    NonFiniteDerivative { t: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("state-input constraint is rank deficient (condition number {condition:e})")]
    RankDeficientConstraint { condition: f64 },
    #[error("Riccati solution blew up (|S| = {norm:e}) at t = {t}")]
    RiccatiBlowup { t: f64, norm: f64 },
    #[error("rollout diverged at t = {t}")]
    DivergentRollout { t: f64 },
    #[error("line search rejected every step")]
    StepRejected,
    #[error("pair is not stabilizable: {0}")]
    Unstabilizable(String),
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("at t = {t}: {source}")]
    AtTime {
        t: f64,
        #[source]
        source: Box<Error>,
    },
    #[error("partition {partition}: {source}")]
    InPartition {
        partition: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub fn at_time(self, t: f64) -> Self {
        Error::AtTime {
            t,
            source: Box::new(self),
        }
    }

    pub fn in_partition(self, partition: usize) -> Self {
        Error::InPartition {
            partition,
            source: Box::new(self),
        }
    }

    /// Strips context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtTime { source, .. } | Error::InPartition { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
