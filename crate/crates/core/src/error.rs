use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes. The CLI maps these onto its exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Provider,
    Data,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid document: {0}")]
    InvalidDocument(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Provider(#[from] ProviderError),

    #[error("no precomputed vector for text (sha256 {hash})")]
    MissingVector { hash: String },

    #[error("invalid seed bank: {0}")]
    InvalidBank(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Provider(_) => ErrorKind::Provider,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl std::fmt::Display, line: usize, message: impl ToString) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            message: message.to_string(),
        }
    }
}

/// Failure talking to a remote model endpoint.
///
/// Carries enough retry metadata for a caller to decide whether to try again later.
#[derive(Debug, Error)]
#[error("provider `{provider}` failed after {attempts} attempt(s){}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
pub struct ProviderError {
    pub provider: String,
    pub message: String,
    pub attempts: u32,
    pub status: Option<u16>,
    pub retry_after: Option<Duration>,
    pub retryable: bool,
}
