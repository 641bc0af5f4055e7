use thiserror::Error;

/// Every failure the library can report. Variant names double as the
/// diagnostic names printed by the command line front end.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("eigen decomposition did not converge")]
    NoConvergence,

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("normal cdf budget exceeded: estimate {estimate:e} with error bound {error_bound:e}")]
    CdfBudgetExceeded { estimate: f64, error_bound: f64 },

    #[error("truncation region has too little probability for both rejection and Gibbs sampling")]
    AcceptanceTooLow,

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("singular block: {0}")]
    SingularBlock(String),

    #[error("duplicate location at index {0}")]
    DuplicateLocation(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("could not bracket the inverse transform for t = {0}")]
    BracketFailure(f64),

    #[error("node {0} has no self-loop in its neighbor list")]
    MissingSelfLoop(usize),

    #[error("loss is not a scalar (shape {rows}x{cols})")]
    NotScalarLoss { rows: usize, cols: usize },

    #[error("backward was already run on this tape")]
    BackwardTwice,

    #[error("non-finite training loss at iteration {iteration} (theta {theta:?})")]
    NonFiniteLoss { iteration: usize, theta: [f64; 7] },

    #[error("parameters became non-finite at iteration {0}")]
    Diverged(usize),

    #[error("weights file: {0}")]
    WeightsFormat(String),

    #[error("i/o: {0}")]
    Io(String),

    #[error("parse: {0}")]
    Parse(String),
}

impl Error {
    /// Short stable name of the variant.
    pub fn name(&self) -> &'static str {
        match self {
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::NotSymmetric(_) => "NotSymmetric",
            Error::NoConvergence => "NoConvergence",
            Error::DomainError(_) => "DomainError",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::CdfBudgetExceeded { .. } => "CdfBudgetExceeded",
            Error::AcceptanceTooLow => "AcceptanceTooLow",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::SingularBlock(_) => "SingularBlock",
            Error::DuplicateLocation(_) => "DuplicateLocation",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::BracketFailure(_) => "BracketFailure",
            Error::MissingSelfLoop(_) => "MissingSelfLoop",
            Error::NotScalarLoss { .. } => "NotScalarLoss",
            Error::BackwardTwice => "BackwardTwice",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::Diverged(_) => "Diverged",
            Error::WeightsFormat(_) => "WeightsFormat",
            Error::Io(_) => "Io",
            Error::Parse(_) => "Parse",
        }
    }

    /// True for failures caused by bad input or configuration rather than
    /// by numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::DomainError(_)
                | Error::DimensionMismatch(_)
                | Error::ShapeMismatch(_)
                | Error::IndexOutOfRange { .. }
                | Error::DuplicateLocation(_)
                | Error::InvalidParameter(_)
                | Error::WeightsFormat(_)
                | Error::Io(_)
                | Error::Parse(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
