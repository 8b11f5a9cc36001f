use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulator and its building blocks.
#[derive(Debug, Error)]
pub enum FedMapError {
    /// Shapes, lengths or counts that do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    /// A non-finite value appeared while computing layer `layer`.
    #[error("numeric error in layer {layer}: {msg}")]
    Numeric { layer: usize, msg: String },

    #[error("config parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid config value for `{key}`: {msg}")]
    Config { key: String, msg: String },

    /// A binary file or wire frame that could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FedMapError {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        FedMapError::Structural(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        FedMapError::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedMapError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user configuration rather than execution.
    pub fn is_config_error(&self) -> bool {
        matches!(self, FedMapError::Parse { .. } | FedMapError::Config { .. })
    }
}

pub type Result<T> = std::result::Result<T, FedMapError>;
