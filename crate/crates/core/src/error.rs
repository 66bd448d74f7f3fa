use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("ground-truth person IDs required: {0}")]
    LabelsRequired(String),
    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("row {row} is not unit-norm (norm {norm})")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("infeasible simulation target: {0}")]
    Infeasible(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("anchor {anchor} has no {missing} in the batch")]
    Mining {
        anchor: usize,
        missing: &'static str,
    },
    #[error("query has no relevant gallery item")]
    NoRelevant,
    #[error("no tracklet was assigned to a cluster ({n_noise} noise)")]
    EmptyLabeling { n_noise: usize },
    #[error("epoch {epoch} aborted: {diagnostics}")]
    EpochAbort { epoch: usize, diagnostics: String },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse grouping used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Stage,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Infeasible(_) => ErrorCategory::Config,
            Error::Stage { .. } | Error::EpochAbort { .. } | Error::EmptyLabeling { .. } => {
                ErrorCategory::Stage
            }
            _ => ErrorCategory::Data,
        }
    }
}
