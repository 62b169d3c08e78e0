use std::path::PathBuf;

/// Errors produced by the library. Each variant maps onto one CLI exit code
/// through [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("layer mode error: {0}")]
    Mode(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("non-differentiable point: {0}")]
    NonDifferentiable(String),
    #[error("infeasible pruning ratio: {0}")]
    InfeasibleRatio(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for configuration problems, 2 for runtime or
    /// numerical failures, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidDimension(_)
            | Error::Config(_)
            | Error::InfeasibleRatio(_)
            | Error::Manifest(_) => 1,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Shape(_)
            | Error::Contract(_)
            | Error::Mode(_)
            | Error::Generation(_)
            | Error::NonDifferentiable(_)
            | Error::Numerical(_) => 2,
        }
    }
}
