use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable name of the variant (of the innermost error
    /// for stage wrappers).
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Parameter(_) => "parameter",
            Error::Data(_) => "data",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::Divergence { .. } => "divergence",
            Error::Config(_) => "config",
            Error::Stage { source, .. } => source.kind(),
        }
    }

    /// Outermost stage name, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// The file involved, if any.
    pub fn file(&self) -> Option<&std::path::Path> {
        match self {
            Error::Io { path, .. } | Error::Format { path, .. } => Some(path),
            Error::Stage { source, .. } => source.file(),
            _ => None,
        }
    }

    /// Display text of the innermost error.
    pub fn root_message(&self) -> String {
        match self {
            Error::Stage { source, .. } => source.root_message(),
            other => other.to_string(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
