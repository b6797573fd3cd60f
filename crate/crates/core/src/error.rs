use thiserror::Error;

/// Errors produced anywhere in the H² / sparsification / solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty cloud")]
    EmptyCloud,
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
    #[error("invalid leaf size {0} (must be at least 2)")]
    InvalidLeafSize(usize),
    #[error("unbalanced trees: row depth {row}, column depth {col}")]
    UnbalancedTrees { row: usize, col: usize },
    #[error("invalid kernel parameter: {0}")]
    InvalidKernel(String),
    #[error("singular pair: points {0} and {1} coincide")]
    SingularPair(usize, usize),
    #[error("oracle too large: N = {n} exceeds cap {cap}")]
    OracleTooLarge { n: usize, cap: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid rank {rank} for block of size {size}")]
    InvalidRank { rank: usize, size: usize },
    #[error("bases not orthogonal (cluster {cluster}, defect {defect:e})")]
    BasesNotOrthogonal { cluster: usize, defect: f64 },
    #[error("not SPD: non-positive pivot {pivot:e} at column {column}")]
    NotSpd { column: usize, pivot: f64 },
    #[error("singular: no admissible pivot in column {0}")]
    Singular(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
