use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {what} at node {node}")]
    NonFinite { what: &'static str, node: usize },

    #[error("rate {value} outside [-{limit}, {limit}] (battery {battery})")]
    RateOutOfRange {
        battery: usize,
        value: f64,
        limit: f64,
    },

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("control inadmissible: {0} violation(s), first at node {1}")]
    Inadmissible(usize, usize),

    #[error("exponential overflow of factor {factor} at node {node}")]
    Overflow { factor: usize, node: usize },

    #[error("drift or diffusion returned a non-finite value on path {path} at node {node}")]
    NonFiniteCoefficient { path: usize, node: usize },

    #[error("explicit scheme unstable: dt = {dt}, need dt <= {required}")]
    Unstable { dt: f64, required: f64 },

    #[error("state grid has {0} axes; the grid solver handles at most 4, use the dual bound instead")]
    TooManyAxes(usize),

    #[error("internal invariant failed: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], what: &'static str, node: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what, node })
    }
}
