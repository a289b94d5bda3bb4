//! Error type shared by the numerical, fusion and transport layers.

use crate::gaussian::VariableId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Information matrix is not positive definite, so no moment form exists.
    #[error("information matrix is singular or indefinite (min eig {min_eig:e}, max eig {max_eig:e})")]
    SingularInformation { min_eig: f64, max_eig: f64 },

    #[error("covariance matrix is singular or indefinite")]
    SingularCovariance,

    #[error("unknown variable {0}")]
    UnknownVariable(VariableId),

    /// The block being eliminated by a Schur complement is not invertible.
    #[error("cannot eliminate variables: eliminated information block is not positive definite")]
    SingularElimination,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("factor graph has no factors")]
    EmptyGraph,

    #[error("conservative deflation failed: {0}")]
    DeflationFailure(String),

    #[error("measurement geometry is degenerate: {0}")]
    DegenerateGeometry(String),

    /// Fused common marginal lost positive definiteness (channel filter out of sync).
    #[error("fused common information is not positive definite (min eig {min_eig:e})")]
    NonPsdFusion { min_eig: f64 },

    #[error("no convex combination of the two information matrices is positive definite")]
    SingularCombination,

    #[error("malformed message: {field}: {reason}")]
    MalformedMessage { field: String, reason: String },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid task allocation: {0}")]
    TaskAllocation(String),

    /// Scenario file problem; `field` is a dotted path into the document.
    #[error("{path}: {field}: {reason}")]
    Config { path: String, field: String, reason: String },

    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn malformed(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::MalformedMessage {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
