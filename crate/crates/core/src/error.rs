use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: parse error at row {row}, column {col}: {message}")]
    Parse {
        file: PathBuf,
        row: usize,
        col: usize,
        message: String,
    },

    #[error("{file}: dimension mismatch: {message}")]
    Dimension { file: PathBuf, message: String },

    #[error("{file}: entry ({row}, {col}) outside a {rows}x{cols} matrix")]
    OutOfBounds {
        file: PathBuf,
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("duplicate spot id `{0}`")]
    DuplicateSpot(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: input outside the function domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite value produced by {op} at ({row}, {col})")]
    NonFiniteEntry {
        op: &'static str,
        row: usize,
        col: usize,
    },

    #[error("embedding provider failed: {message} (spots: {})", failed_spots.join(", "))]
    Provider {
        message: String,
        failed_spots: Vec<String>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    /// Wraps the error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Dimension { .. }
            | Error::OutOfBounds { .. }
            | Error::DuplicateSpot(_)
            | Error::Data(_)
            | Error::Checkpoint(_) => 3,
            Error::Shape { .. }
            | Error::Domain { .. }
            | Error::NonFinite { .. }
            | Error::NonFiniteEntry { .. } => 4,
            Error::Provider { .. } => 5,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
