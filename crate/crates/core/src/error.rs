use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("task `{task}`: {source}")]
    Task {
        task: String,
        #[source]
        source: Box<Error>,
    },

    #[error("pipeline stage {index} ({stage}) failed: {source}")]
    Stage {
        index: usize,
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("architecture mismatch: student {student} vs teacher {teacher}")]
    ArchitectureMismatch { student: String, teacher: String },

    #[error("checkpoint version {found} is not supported (this build reads up to {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("checkpoint checksum mismatch; refusing to load")]
    CheckpointChecksum,

    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// The innermost error beneath task, stage and checkpoint-path wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Task { source, .. } | Error::Stage { source, .. } | Error::Checkpoint { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: msg.into(),
        }
    }
}
