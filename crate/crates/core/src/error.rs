use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("integration failed{}: {reason}", row.map(|r| format!(" for row {r}")).unwrap_or_default())]
    Integration { row: Option<usize>, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {section} section: {detail}")]
    Format { section: &'static str, detail: String },

    #[error("incompatible format: {0}")]
    Incompatible(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::EmptySequence(_) => "empty-sequence",
            Error::State(_) => "state",
            Error::Diverged { .. } => "diverged",
            Error::Integration { .. } => "integration",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Incompatible(_) => "incompatible",
            Error::Parse { .. } => "parse",
        }
    }
}
