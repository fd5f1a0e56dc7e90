use chrono::{DateTime, Utc};

/// Errors produced anywhere in the forecasting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("layout error: {0}")]
    Layout(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate channel {channel}: std {std:e} below threshold")]
    DegenerateChannel { channel: usize, std: f64 },
    #[error("data gap: no state at {0}")]
    DataGap(DateTime<Utc>),
    #[error("ingestion error in {file}: {reason}")]
    Ingest { file: String, reason: String },
    #[error("selector error: {0}")]
    Selector(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status: 2 for configuration problems, 3 for I/O and
    /// file-format problems, 4 for numerical failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Layout(_)
            | Error::Domain(_)
            | Error::Shape(_)
            | Error::Config(_)
            | Error::DegenerateChannel { .. }
            | Error::Selector(_)
            | Error::Metric(_) => 2,
            Error::DataGap(_) | Error::Ingest { .. } | Error::Checkpoint(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::NonFinite { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
