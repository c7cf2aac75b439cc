use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("training diverged at epoch {epoch} (lr {lr}): loss is {loss}")]
    Diverged { epoch: usize, lr: f64, loss: f64 },

    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("knapsack table of {cells} cells exceeds the limit of {limit}")]
    TableTooLarge { cells: u128, limit: u128 },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("missing artifact {path}: {reason}")]
    MissingArtifact { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable short name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Degenerate(_) => "degenerate_input",
            Error::Format { .. } => "format",
            Error::Checksum(_) => "checksum",
            Error::InvalidPlan(_) => "invalid_plan",
            Error::Diverged { .. } => "diverged",
            Error::Measurement(_) => "measurement",
            Error::TableTooLarge { .. } => "table_too_large",
            Error::Stage { source, .. } => source.kind(),
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
