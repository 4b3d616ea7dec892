use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid network, training or experiment configuration.
    #[error("{0}")]
    Config(String),

    /// Malformed MIL-CSV or model file.
    #[error("{source_name}: line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    /// Well-formed input whose content cannot be used (empty dataset, wrong dimension, ...).
    #[error("{0}")]
    Data(String),

    /// NaN/Inf produced during training.
    #[error("{0}")]
    Numerical(String),

    /// Backward called without a matching forward.
    #[error("{0}")]
    State(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-greppable category, used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Data(_) => "data",
            Error::Numerical(_) => "numerical",
            Error::State(_) => "state",
            Error::Io { .. } => "io",
        }
    }
}
