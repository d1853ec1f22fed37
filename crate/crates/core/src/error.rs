use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by op `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("cholesky factorization failed at pivot {pivot}: matrix is not positive definite (insufficient damping?)")]
    Cholesky { pivot: usize },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("solver produced non-finite values at step {step}")]
    SolverNan { step: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dataset line {line}: {msg}")]
    Dataset { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
