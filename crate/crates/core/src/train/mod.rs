//! Adam, learning-rate schedules, stratified cross-validation, metrics and
//! the training loop.

mod cv;
mod metrics;
mod optim;
mod pipeline;
mod schedule;
mod trainer;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::DataError;
use crate::graph::GraphError;
use crate::inflation::InflationError;
use crate::weights::WeightsError;
use crate::zoo::ZooError;

pub use cv::{stratified_holdout, stratified_kfold};
pub use metrics::{Confusion, Metrics, MetricsReport, NUM_CLASSES};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use pipeline::{fold_cases, run_fold, FoldOutcome, Init, ModelSpec, Stage};
pub use schedule::{early_stop, epochs_since_improvement, reduce_lr_on_plateau, ScheduleConfig};
pub use trainer::{
    evaluate, history_csv, predict_cases, write_history_csv, Checkpoint, EpochRecord, Evaluation,
    SampleMode, TrainConfig, Trainer, DEFAULT_FOLDS, DEFAULT_MAX_EPOCHS, DEFAULT_VAL_FRACTION,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("non-finite gradient for {0:?}; step skipped")]
    NonFiniteGradient(String),
    #[error("epoch {epoch}, batch {batch}: loss is not finite")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Numeric {
        epoch: usize,
        batch: usize,
        #[source]
        source: GraphError,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Inflation(#[from] InflationError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Config(e.to_string())
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;
