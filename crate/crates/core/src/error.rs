use thiserror::Error;

/// Errors raised by scaling, transport, reduction and generation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid targets: {0}")]
    InvalidTargets(String),

    /// A row or column about to be normalized sums to zero.
    #[error("zero {axis} sum at index {index}: instance is not scalable")]
    ZeroMarginal { axis: Axis, index: usize },

    /// An entry overflowed or a positive entry underflowed to zero.
    #[error("non-finite or underflowed entry at step {step}; use the log-domain engine")]
    NonFinite { step: usize },

    #[error("matrix is not standardized (neither all row sums nor all column sums equal 1)")]
    NotStandardized,

    #[error("kernel underflows to zero everywhere; use the log-domain engine")]
    AllZeroKernel,

    #[error("row or column {index} has empty support in the log domain")]
    EmptySupport { index: usize },

    #[error("L = {0} too small: some floor(L*u_i) or floor(L*v_j) is zero")]
    LTooSmall(u64),

    #[error("expanded size {n} exceeds the limit {limit}")]
    ExpansionTooLarge { n: usize, limit: usize },

    #[error("permanent requested for n = {n} > {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("constraint window infeasible: condition ({condition}) violated: {detail}")]
    InfeasibleWindow { condition: &'static str, detail: String },

    #[error("dimension {0} is not a positive multiple of 10")]
    BadDim(usize),

    #[error("instance is not scalable for the requested targets")]
    NotScalable,

    #[error("no prefix/suffix sums match (gamma, gamma'): {0}")]
    InfeasibleGammaPair(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Row,
    Column,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::Row => f.write_str("row"),
            Axis::Column => f.write_str("column"),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
