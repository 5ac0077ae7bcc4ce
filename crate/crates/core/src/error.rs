use std::path::PathBuf;

/// Broad failure category, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid configuration or arguments.
    Config,
    /// Bad or insufficient input data, corrupt files, I/O failures.
    Data,
    /// Numerical divergence during training.
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A record in a line-oriented input file could not be used.
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{0}")]
    Data(String),

    #[error("tokenizer file: {0}")]
    TokenizerFormat(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("tokenizer fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("all positions masked")]
    AllMasked,

    #[error("divergence at step {step}")]
    Divergence { step: u64 },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Divergence { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn record(line: usize, message: impl Into<String>) -> Self {
        Error::Record {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
