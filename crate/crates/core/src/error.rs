use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible or invalid tensor shapes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an operation's precondition (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// Binary target with no positives or no negatives.
    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Missing or inconsistent annotations.
    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {}{}: {msg}", path.display(), line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        msg: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input (config, data, files) rather
    /// than a numeric or runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Data(_) | Error::Parse { .. } | Error::DegenerateTarget(_)
        )
    }
}
