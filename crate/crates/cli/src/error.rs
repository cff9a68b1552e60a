use std::path::PathBuf;

use prunekit::distill::DistillError;
use prunekit::importance::ImportanceError;
use prunekit::io::IoError;
use prunekit::model::ModelError;
use prunekit::pruner::PruneError;
use prunekit::search::SearchError;
use serde_json::json;
use thiserror::Error;

/// Every failure the command line reports, one variant per error class.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: file not found")]
    MissingFile { path: PathBuf },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Shape(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn class(&self) -> &'static str {
        match self {
            CliError::MissingFile { .. } => "missing_file",
            CliError::Config(_) => "invalid_config",
            CliError::Shape(_) => "shape_conflict",
            CliError::Format(_) => "corrupt_file",
            CliError::Diverged(_) => "diverged",
            CliError::Data(_) => "insufficient_data",
            CliError::Internal(_) => "internal",
        }
    }

    /// Exit status; 2 is left to argument parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingFile { .. } => 3,
            CliError::Config(_) => 4,
            CliError::Shape(_) => 5,
            CliError::Format(_) => 6,
            CliError::Diverged(_) => 7,
            CliError::Data(_) => 8,
            CliError::Internal(_) => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": { "class": self.class(), "code": self.exit_code(), "message": self.to_string() } })
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        let msg = e.to_string();
        match e {
            IoError::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::MissingFile { path }
            }
            IoError::Io { .. } => CliError::Internal(msg),
            IoError::BadMagic { .. }
            | IoError::UnsupportedVersion { .. }
            | IoError::Truncated { .. }
            | IoError::Header(_)
            | IoError::Directory(_)
            | IoError::Manifest(_) => CliError::Format(msg),
            IoError::Config(_) | IoError::UnknownSplit(_) => CliError::Config(msg),
            IoError::TokenOutOfRange { .. } => CliError::Shape(msg),
            IoError::EmptyInput | IoError::InsufficientData { .. } => CliError::Data(msg),
            IoError::Model(m) => m.into(),
            IoError::Tensor(_) => CliError::Internal(msg),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let msg = e.to_string();
        match e {
            ModelError::InvalidConfig(_) => CliError::Config(msg),
            ModelError::EmptyData => CliError::Data(msg),
            ModelError::SequenceTooLong { .. } | ModelError::BadToken { .. } | ModelError::ParamShape { .. } => {
                CliError::Shape(msg)
            }
            ModelError::Tensor(_) => CliError::Internal(msg),
        }
    }
}

impl From<PruneError> for CliError {
    fn from(e: PruneError) -> Self {
        let msg = e.to_string();
        match e {
            PruneError::Model(m) => m.into(),
            PruneError::Tensor(_) => CliError::Internal(msg),
            PruneError::AxisDisabled(_) | PruneError::MergeRange { .. } => CliError::Config(msg),
            _ => CliError::Shape(msg),
        }
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        let msg = e.to_string();
        match e {
            DistillError::Diverged { .. } => CliError::Diverged(msg),
            DistillError::Config(_) | DistillError::UnmappedComponent => CliError::Config(msg),
            DistillError::Shape(_) => CliError::Shape(msg),
            DistillError::Model(m) => m.into(),
            DistillError::Io(io) => io.into(),
            DistillError::Tensor(_) => CliError::Internal(msg),
        }
    }
}

impl From<ImportanceError> for CliError {
    fn from(e: ImportanceError) -> Self {
        let msg = e.to_string();
        match e {
            ImportanceError::Model(m) => m.into(),
            ImportanceError::Prune(p) => (*p).into(),
            ImportanceError::UnknownAggregation(_) | ImportanceError::Schedule(_) => CliError::Config(msg),
            ImportanceError::Empty(_) => CliError::Data(msg),
            _ => CliError::Shape(msg),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        let msg = e.to_string();
        match e {
            SearchError::Space(_) | SearchError::Tolerance(_) | SearchError::Options(_) => CliError::Config(msg),
            SearchError::Prune { source, .. } => match CliError::from(source) {
                CliError::Config(_) => CliError::Config(msg),
                _ => CliError::Shape(msg),
            },
            SearchError::Train { source, .. } => match CliError::from(source) {
                CliError::Diverged(_) => CliError::Diverged(msg),
                _ => CliError::Internal(msg),
            },
            SearchError::Manifest(_) => CliError::Format(msg),
            SearchError::Io(io) => io.into(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Format(e.to_string())
    }
}
