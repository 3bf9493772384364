use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("cannot build an MPS from an empty tensor list")]
    EmptyMps,

    #[error("bond {bond} mismatch: site {bond} has right dimension {left}, site {next} has left dimension {right}", next = .bond + 1)]
    BondMismatch { bond: usize, left: usize, right: usize },

    #[error("boundary bond of site {site} must be 1, found {dim}")]
    BoundaryBond { site: usize, dim: usize },

    #[error("invalid tensor shape: {0}")]
    InvalidShape(String),

    #[error("non-finite tensor entry at flat position {0}")]
    NonFinite(usize),

    #[error("index has length {got}, expected {expected}")]
    IndexLength { expected: usize, got: usize },

    #[error("index {index} out of range at site {site} (dimension {dim})")]
    IndexOutOfRange { site: usize, index: usize, dim: usize },

    #[error("dense conversion needs {required} elements, cap is {allowed}")]
    DenseCapExceeded { required: u128, allowed: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate binomial scheme: volatility must be positive for CRR")]
    DegenerateScheme,

    #[error("up probability {0} outside [0, 1]; time step too large for this scheme")]
    ProbabilityOutOfRange(f64),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("non-binary entry {value} at position {position}")]
    NonBinary { position: usize, value: usize },

    #[error("matrix is rank deficient (smallest/largest singular value ratio {ratio:e})")]
    RankDeficient { ratio: f64 },

    #[error("brute force refused: {required} evaluations exceed the cap of {allowed}")]
    BruteForceRefused { required: u128, allowed: u128 },

    #[error("correlation matrix is not positive definite (leading minor {minor} fails)")]
    NotPositiveDefinite { minor: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("function evaluation failed: {0}")]
    Eval(String),
}
