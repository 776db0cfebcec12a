use std::path::PathBuf;

use gatefuse::data::DataError;
use gatefuse::model::ModelError;
use gatefuse::training::TrainError;
use gatefuse::TensorError;

/// Every failure maps onto a process exit code: 1 for a failed check,
/// 2 for usage, configuration, I/O or dimension problems, 3 for divergence.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    CheckFailed(String),
    #[error(transparent)]
    Train(TrainError),
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => CliError::Data(d),
            TrainError::Model(m) => CliError::Model(m),
            other => CliError::Train(other),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Model(ModelError::Tensor(e))
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Train(TrainError::Divergence { .. }) => 3,
            _ => 2,
        }
    }
}
