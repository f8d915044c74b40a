use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("time step must be positive and finite, got {0}")]
    InvalidTimeStep(f64),
    #[error("discount factor must lie in (0, 1], got {0}")]
    InvalidDiscount(f64),
    #[error("action component {index} = {value} lies outside [{low}, {high}]")]
    ActionOutOfBounds {
        index: usize,
        value: f64,
        low: f64,
        high: f64,
    },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("riccati solver: {0}")]
    Riccati(String),
    #[error("half-space has a zero normal and excludes the reference action (a^T u = {lhs} < b = {rhs})")]
    DegenerateHalfSpace { lhs: f64, rhs: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training aborted after {0} consecutive non-finite episodes")]
    TrainingDiverged(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

pub(crate) fn check_finite(what: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
