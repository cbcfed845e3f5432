//! Inflated 2D-to-3D CNNs for multi-modal volumetric classification.
//!
//! `tensor` holds the kernels, `graph` the layer IR and executor, `zoo` the
//! Inception-v3 and DenseNet-121 builders, `inflation` the 2D-to-3D and
//! fusion rewrites, `weights` the INNW container, `data` volumes and slice
//! windows, and `train` the optimizer, cross-validation and metrics.

pub mod data;
pub mod graph;
pub mod inflation;
pub mod tensor;
pub mod train;
pub mod weights;
pub mod zoo;

use thiserror::Error;

pub use data::DataError;
pub use graph::{GraphError, NetworkGraph};
pub use inflation::InflationError;
pub use tensor::{Tensor, TensorError};
pub use train::TrainError;
pub use weights::{WeightStore, WeightsError};
pub use zoo::ZooError;

/// Any library error, tagged with the module it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("inflation: {0}")]
    Inflation(#[from] InflationError),
    #[error("zoo: {0}")]
    Zoo(#[from] ZooError),
    #[error("weights: {0}")]
    Weights(#[from] WeightsError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("train: {0}")]
    Train(#[from] TrainError),
}

impl Error {
    pub fn module(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Graph(_) => "graph",
            Error::Inflation(_) => "inflation",
            Error::Zoo(_) => "zoo",
            Error::Weights(_) => "weights",
            Error::Data(_) => "data",
            Error::Train(_) => "train",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
