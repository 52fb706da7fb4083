use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate row {row} in {op}: norm {norm:e} is below 1e-12")]
    DegenerateRow { op: &'static str, row: usize, norm: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("value outside domain in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("relative size state corrupted: {0}")]
    StateCorruption(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}; diagnostics written to {}", .dump.display())]
    NonFiniteLoss { step: u64, dump: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable kind, used by the CLI error report.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::DegenerateRow { .. } => "degenerate_row",
            Error::Parameter(_) => "parameter",
            Error::Domain { .. } => "domain",
            Error::StateCorruption(_) => "state_corruption",
            Error::State(_) => "state",
            Error::Config(_) => "config",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
