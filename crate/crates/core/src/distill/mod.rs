//! Distillation retraining: logit and intermediate-state losses, dynamic
//! weighting, and the optimizer loop.

mod config;
mod loss;
mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{AlphaMode, DistillConfig, IsComponent, IsLossFn, LayerPair, LogitLoss};
pub use loss::{
    capture_for, intermediate_loss, intermediate_loss_graph, logit_loss, logit_loss_graph, softmax_t, top_k_indices,
    total_loss, total_loss_graph, LossGraph, LossValues, SharedProjection,
};
pub use train::{
    conventional_loop, cosine_lr, distill_loop, write_metrics_jsonl, StepMetrics, TrainOptions, TrainOutput,
    TrainState,
};

use crate::io::IoError;
use crate::model::ModelError;
use crate::TensorError;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("intermediate component needs a layer mapping")]
    UnmappedComponent,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss diverged at step {step}; state dumped to {dump:?}")]
    Diverged { step: usize, dump: Option<PathBuf> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl DistillError {
    /// A NaN or infinity surfaced somewhere in the computation.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            DistillError::Tensor(TensorError::NonFinite { .. })
                | DistillError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
        )
    }
}

pub type Result<T> = std::result::Result<T, DistillError>;
