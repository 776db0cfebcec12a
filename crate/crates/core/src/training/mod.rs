//! Loss, optimizer, training loop, metrics and gradient checking.

pub mod adam;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod probe;
pub mod trainer;

pub use adam::AdamState;
pub use gradcheck::{grad_check_model, grad_check_with, GradCheckOptions, GradCheckReport};
pub use loss::cross_entropy_loss;
pub use metrics::{write_history_csv, Confusion, EpochRecord, Metrics};
pub use trainer::{
    batch_loss_and_grads, evaluate, metrics_of, predict_dataset, train, train_with, Prediction, TrainConfig,
    TrainOutcome,
};

use crate::data::DataError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("training diverged (non-finite loss or gradient) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}
