//! Small MLP learner: datasets, analytic backpropagation, a finite-difference
//! oracle, and plain SGD.

mod data;
mod mlp;

pub use data::{load_csv, parse_csv, shuffle_epoch, synth_dataset, Dataset};
pub use mlp::{
    batch_loss, evaluate, finite_diff_grad, forward_backward, init_params, init_params_with,
    predict, Activation, LossKind, MlpSpec,
};

use crate::param::{GradVector, ParamError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LearnerError {
    #[error("invalid network: {0}")]
    InvalidSpec(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// `-learning_rate * grad`, the additive update every protocol ships.
pub fn sgd_delta(grad: &GradVector, learning_rate: f64) -> GradVector {
    let values = grad.values().iter().map(|g| -learning_rate * g).collect();
    GradVector::new(values, grad.partition().clone()).expect("scaling keeps shape")
}

/// Step schedule: the initial rate halves every `halve_every` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub halve_every: u64,
}

impl LrSchedule {
    pub fn new(initial: f64, halve_every: u64) -> Self {
        Self {
            initial,
            halve_every,
        }
    }

    /// Zero-based epoch index.
    pub fn rate(&self, epoch: u64) -> f64 {
        if self.halve_every == 0 {
            return self.initial;
        }
        let halvings = (epoch / self.halve_every).min(1000) as i32;
        self.initial * 0.5f64.powi(halvings)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::new(0.1, 10)
    }
}
