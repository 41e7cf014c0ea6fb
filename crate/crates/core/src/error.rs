use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} is nonpositive)")]
    NotPositiveDefinite { pivot: usize },

    #[error("matrix is not symmetric (max relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("no data rows supplied")]
    EmptyData,

    #[error("row {row} has length {found}, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("probability {0} is outside the open interval (0, 1)")]
    InvalidProbability(f64),

    #[error("{what}: dimension {found} exceeds the cap of {cap}")]
    DimensionTooLarge {
        what: &'static str,
        found: usize,
        cap: usize,
    },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("constraint set {{kappa : A kappa <= rho}} is empty")]
    Infeasible,

    #[error("active-set solver exceeded {0} iterations")]
    MaxIterations(usize),

    #[error("anchor row {0} is not in the active set")]
    AnchorNotActive(usize),

    #[error("anchor row {0} is identically zero")]
    ZeroAnchorRow(usize),

    #[error("alpha = {0} is outside (0, 1/2]")]
    InvalidAlpha(f64),

    #[error("model evaluation failed: {0}")]
    EvaluationFailure(String),

    #[error("score Jacobian G is singular or ill conditioned (condition estimate {condition:e})")]
    SingularG { condition: f64 },

    #[error("non-finite utility encountered for product {product}")]
    NonFiniteUtility { product: usize },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("line search failed to find a decrease (step {step:e})")]
    LineSearchFailure { step: f64 },

    #[error("unknown product: {0}")]
    UnknownProduct(String),

    #[error("no entry or exit events supplied")]
    EmptyEvents,

    #[error("invalid configuration: {field}: {message}")]
    ConfigInvalid { field: String, message: String },

    #[error("invalid input data: {0}")]
    Schema(String),

    #[error("slice value {value} for dimension `{dim}` is not a grid point")]
    SliceNotOnGrid { dim: String, value: f64 },

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigInvalid {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigInvalid { .. }
            | Error::Schema(_)
            | Error::InvalidProbability(_)
            | Error::InvalidAlpha(_)
            | Error::EmptyEvents
            | Error::SliceNotOnGrid { .. }
            | Error::RaggedRows { .. }
            | Error::EmptyData
            | Error::UnknownProduct(_)
            | Error::DimensionTooLarge { .. }
            | Error::ShapeMismatch { .. } => 2,
            Error::Io { .. } => 3,
            Error::NoConvergence { .. } | Error::LineSearchFailure { .. } => 4,
            _ => 5,
        }
    }
}
