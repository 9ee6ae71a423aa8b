use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on shapes, ranks, or arguments was not met.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown domain id {0}")]
    UnknownDomain(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("config: {0}")]
    Config(String),

    #[error("usage: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
