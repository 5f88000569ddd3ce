use thiserror::Error;

/// Problems with the model document or the objects built from it.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parse error at line {line}, column {column} ({path}): {message}")]
    Parse {
        line: usize,
        column: usize,
        path: String,
        message: String,
    },
    #[error("invalid number {0:?}")]
    Number(String),
    #[error("invalid model: {0}")]
    Invalid(String),
}

impl ModelError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        ModelError::Invalid(msg.into())
    }
}

/// Failures while computing marginals, ratios or partition functions.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComputeError {
    #[error("enumeration needs {needed_bits:.1} bits of configuration space, limit is {limit_bits}")]
    EnumerationBudget { needed_bits: f64, limit_bits: u32 },
    #[error("partition function is zero: the boundary condition admits no configuration")]
    ZeroPartitionFunction,
    #[error("vertex {0} is frozen by the boundary condition")]
    FrozenQueryVertex(usize),
    #[error("vertex {0} is out of range")]
    VertexOutOfRange(usize),
    #[error("spin {0} is out of range")]
    SpinOutOfRange(usize),
    #[error("reference spin {0} has zero probability")]
    ReferenceSpinHasZeroProbability(usize),
    #[error("zero denominator for reference spin {reference} along walk {path:?}")]
    ZeroDenominator { reference: usize, path: Vec<usize> },
    #[error("no reference spin gives a well-defined ratio recursion")]
    NoFeasibleReference,
    #[error("ratio vector has no positive entry")]
    AllZeroRatios,
    #[error("model is not spatially invariant: {0}")]
    NotSpatiallyInvariant(String),
    #[error("operation needs a pairwise graph, got a hypergraph")]
    NeedsGraph,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
