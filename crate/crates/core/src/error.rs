use thiserror::Error;

/// Errors raised by the numerical laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid domain partition: {0}")]
    InvalidPartition(String),

    #[error("coefficient is not elliptic at node {node}: smallest eigenvalue {eigenvalue:e}")]
    NotElliptic { node: usize, eigenvalue: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("operator is not symmetric in the mass pairing (relative asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("spectral function is not finite at eigenvalue {0:e}")]
    NonFiniteSpectralFunction(f64),

    #[error("quadrature range leaves too much tail mass: {0}")]
    QuadratureTail(String),

    #[error("interior system is near singular (condition estimate {condition:e})")]
    NearSingular { condition: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("neumann trace on the reflection patch is {trace:e}, above threshold {threshold:e}")]
    TraceNotVanishing { trace: f64, threshold: f64 },

    #[error("insufficient resolution: {0}")]
    InsufficientResolution(String),

    #[error("field vanishes on the ball (H(r) = 0)")]
    VanishingField,

    #[error("misfit did not decrease after backtracking at iteration {iteration}")]
    NonDecreasingMisfit { iteration: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
