use thiserror::Error;

pub type Result<T> = std::result::Result<T, DaisiError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DaisiError {
    #[error("time {t} outside [0, 1]")]
    TimeOutOfRange { t: f64 },

    #[error("singular schedule point at t = {t}: {what}")]
    SingularSchedule { t: f64, what: &'static str },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("conjugate gradient did not converge after {iterations} iterations (residual norm {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("Monte Carlo guidance pool depleted at t = {t}")]
    PoolDepleted { t: f64 },

    #[error("guidance failed at t = {t}: {source}")]
    Guidance {
        t: f64,
        #[source]
        source: Box<DaisiError>,
    },

    #[error("ensemble member {member}: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<DaisiError>,
    },

    #[error("all particle weights vanished at step {step}")]
    WeightDegeneracy { step: usize },

    #[error("covariance is not positive semi-definite: {0}")]
    NotPsd(&'static str),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for DaisiError {
    fn from(e: std::io::Error) -> Self {
        DaisiError::Io(e.to_string())
    }
}

impl DaisiError {
    pub(crate) fn in_member(self, member: usize) -> Self {
        DaisiError::Member {
            member,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_guidance(self, t: f64) -> Self {
        DaisiError::Guidance {
            t,
            source: Box::new(self),
        }
    }
}
