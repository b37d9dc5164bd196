use std::path::PathBuf;

/// Errors raised by the detector toolkit.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// An operation was called with arguments that break its contract
    /// (mismatched shapes, out-of-range pixel values, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is invalid or inconsistent with the data.
    #[error("configuration error: {0}")]
    Config(String),

    /// A binary container or checkpoint could not be parsed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// A checkpoint was produced for a different architecture.
    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchMismatch { expected: String, found: String },

    /// A dataset manifest entry failed validation.
    #[error("invalid manifest entry {entry}: {message}")]
    Validation { entry: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(message: impl Into<String>) -> Error {
    Error::Contract(message.into())
}

pub(crate) fn config(message: impl Into<String>) -> Error {
    Error::Config(message.into())
}

pub(crate) fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
