use std::io;

/// Errors raised by the estimation library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numerical failure. `step` is filled in by the recursion driver.
    #[error("numeric failure{}: {msg}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric { step: Option<usize>, msg: String },

    #[error("ingestion error at row {row}: {msg}")]
    Ingest { row: usize, msg: String },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("unsupported format or version: {0}")]
    Version(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric {
            step: None,
            msg: msg.into(),
        }
    }

    /// Attach a step index to a numeric error; other variants pass through.
    pub fn at_step(self, t: usize) -> Self {
        match self {
            Error::Numeric { step: None, msg } => Error::Numeric { step: Some(t), msg },
            other => other,
        }
    }
}
