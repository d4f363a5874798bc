use std::path::PathBuf;

use fusion_core::FusionError;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}:{line}: {msg}")]
    ConfigLine { path: PathBuf, line: usize, msg: String },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// The command ran but did not succeed (failed check, failed preset, ...).
    #[error("{0}")]
    Failed(String),

    #[error(transparent)]
    Core(#[from] FusionError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 failed run, 2 usage or configuration, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::ConfigLine { .. } => 2,
            CliError::Core(e) => match e {
                FusionError::TrainingAborted(_) | FusionError::NonFinite { .. } | FusionError::NanGradient(_) => 3,
                FusionError::InvalidArgument(_) | FusionError::Shape(_) => 2,
                _ => 1,
            },
            CliError::Image { .. } | CliError::Failed(_) | CliError::Io { .. } => 1,
        }
    }
}
