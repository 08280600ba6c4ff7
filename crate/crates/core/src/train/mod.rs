//! Training: the trajectory+action loss, Adam, teacher forcing, and the
//! epoch loop.

mod adam;
mod loss;
mod trainer;

pub use adam::Adam;
pub use loss::{clip_loss, trajectory_action_loss, LossParams};
pub use trainer::{train, EpochRecord, TrainLog};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, clip {clip}: {value}")]
    NonFiniteLoss { epoch: usize, clip: String, value: f64 },
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the action term in the loss.
    pub lambda_action: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Use ground-truth target history during training (free-running
    /// otherwise).
    pub teacher_forcing: bool,
    /// Replace the L2 norms in the loss with squared norms.
    pub squared_error: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_action: 0.1,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            teacher_forcing: true,
            squared_error: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| TrainError::Model(ModelError::Config(m));
        if self.lambda_action < 0.0 {
            return Err(bad(format!("lambda_action {} must be >= 0", self.lambda_action)));
        }
        if self.learning_rate <= 0.0 {
            return Err(bad(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(bad("batch_size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}
