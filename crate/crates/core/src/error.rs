use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value outside the domain of an operation (bad dimensions, severity, shapes).
    #[error("domain error: {0}")]
    Domain(String),

    /// Input data failed validation (unmapped labels, missing files, bad manifests).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    /// A persisted artifact is corrupt or from an incompatible format version.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Domain(_)
            | Error::Validation(_)
            | Error::Integrity(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Image(_) => 3,
            Error::Training { .. } => 4,
            Error::Io { .. } => 5,
        }
    }

    /// Short machine-parseable category tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::Integrity(_) => "integrity",
            Error::Training { .. } => "training",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
        }
    }
}
