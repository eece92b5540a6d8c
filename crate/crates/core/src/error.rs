use thiserror::Error;

/// Crate-wide error type.
///
/// `Validation`, `Schema` and `Shape` mean the caller handed us something
/// malformed (CLI maps these to exit code 1). The remaining variants are
/// runtime failures (exit code 2).
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),

    #[error("schema violation in {path}: {msg}")]
    Schema { path: String, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn schema(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input rather than internal failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Schema { .. } | Error::Shape(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
