use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DamError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DamError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("composition error: {0}")]
    Composition(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DamError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DamError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DamError::Config(_) | DamError::Plan(_) | DamError::Composition(_) => 2,
            DamError::Input(_)
            | DamError::Data(_)
            | DamError::Parse { .. }
            | DamError::Shape(_)
            | DamError::Numeric(_) => 3,
            DamError::MissingCheckpoint(_) | DamError::Format(_) => 4,
            DamError::Io { .. } => 3,
        }
    }
}
