use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Manifest or config could not be parsed, or a field holds an invalid value.
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    /// The vector payload disagrees with what the manifest describes.
    #[error("corruption: {0}")]
    Corruption(String),

    /// Payload values that cannot be used (non-finite floats, empty segments).
    #[error("data error: {0}")]
    Data(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format { .. } => "format",
            Error::Corruption(_) => "corruption",
            Error::Data(_) => "data",
            Error::Contract(_) => "contract",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code: 1 validation, 2 I/O (including damaged payload files), 3 contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format { .. } | Error::Data(_) => 1,
            Error::Io { .. } | Error::Corruption(_) => 2,
            Error::Contract(_) => 3,
        }
    }

    /// Prefixes the message with context, keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Format { field, message } => Error::Format {
                field,
                message: format!("{ctx}: {message}"),
            },
            Error::Corruption(m) => Error::Corruption(format!("{ctx}: {m}")),
            Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
            Error::Contract(m) => Error::Contract(format!("{ctx}: {m}")),
            io @ Error::Io { .. } => io,
        }
    }
}
