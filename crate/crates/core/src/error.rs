use thiserror::Error;

/// Every failure the engine can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A backward rule asked for a tensor the forward pass did not keep.
    #[error("retention policy violated: {0}")]
    RetentionPolicy(String),

    #[error("operation not valid in this adaptation mode: {0}")]
    Mode(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("optimizer state mismatch: {0}")]
    State(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("reconciliation failed: {0}")]
    Reconciliation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
