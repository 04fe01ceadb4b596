use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents or element counts do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar argument is outside its admissible range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A binary file (volume or checkpoint) failed to parse.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Run configuration or dataset composition is unusable.
    #[error("configuration error: {0}")]
    Config(String),

    /// Gradients do not cover exactly the trainable registry.
    #[error("registry error: {0}")]
    Registry(String),

    /// Metric inputs contain a single class.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Stored tensors disagree with the architecture they are loaded onto.
    #[error("load error: {0}")]
    Load(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
