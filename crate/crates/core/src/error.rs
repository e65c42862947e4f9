use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Panel shape problems: ragged trajectories, mismatched feature widths, non-finite values.
    #[error("structural error: {0}")]
    Structure(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("incompatible link: {0}")]
    IncompatibleLink(String),

    #[error("solver did not converge after {iterations} iterations (|P_n m|_inf = {residual:e}): {reason}")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        reason: String,
        last: Vec<f64>,
    },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("nuisance fit failed: {0}")]
    Nuisance(String),

    #[error("cross-fitting fold {fold} failed: {reason}")]
    Fold { fold: usize, reason: String },

    #[error("generator error: {0}")]
    Generator(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("study aborted: {0}")]
    Study(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Structure(_) => "structure",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::IncompatibleLink(_) => "incompatible_link",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Singular(_) => "singular",
            Error::Nuisance(_) => "nuisance",
            Error::Fold { .. } => "fold",
            Error::Generator(_) => "generator",
            Error::Schema(_) => "schema",
            Error::Parse { .. } => "parse",
            Error::Study(_) => "study",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
