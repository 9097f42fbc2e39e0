//! Binary cross-entropy training with Adam and early stopping.

mod adam;
mod engine;

use serde::{Deserialize, Serialize};

pub use adam::{Adam, Moments};
pub use engine::{
    overfit_sanity, predict_samples, run_training, stack_inputs, RunOptions, TrainOutcome, LOG_FILE,
};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// Dropout on the dense layer during training; overrides the network's.
    pub dropout_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            min_delta: 0.0,
            dropout_rate: 0.3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let problems = [
            (!(self.learning_rate > 0.0 && self.learning_rate.is_finite()), "learning_rate must be positive"),
            (self.batch_size == 0, "batch_size must be at least 1"),
            (self.max_epochs == 0, "max_epochs must be at least 1"),
            (self.patience == 0, "patience must be at least 1"),
            (!(self.min_delta >= 0.0), "min_delta must be non-negative"),
            (!(0.0..1.0).contains(&self.dropout_rate), "dropout_rate must be in [0,1)"),
            (!(0.0..1.0).contains(&self.adam_beta1), "adam_beta1 must be in [0,1)"),
            (!(0.0..1.0).contains(&self.adam_beta2), "adam_beta2 must be in [0,1)"),
            (!(self.adam_epsilon > 0.0), "adam_epsilon must be positive"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

/// Early-stopping bookkeeping on validation loss.
///
/// An epoch improves when `val_loss < best_val_loss - min_delta`. Training
/// stops once `patience` consecutive epochs fail to improve.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
        }
    }

    /// Records `val_loss` for `epoch`; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best_val_loss - self.min_delta {
            self.best_val_loss = val_loss;
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
            true
        } else {
            self.epochs_since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_since_improvement >= self.patience
    }
}

/// Replays a validation-loss sequence through the stopping rule. Returns
/// `(last epoch run, best epoch)`, with epochs counted from 1.
pub fn simulate_early_stopping(val_losses: &[f64], patience: usize, min_delta: f64, max_epochs: usize) -> (usize, usize) {
    let mut es = EarlyStopping::new(patience, min_delta);
    let mut last = 0;
    for (i, &v) in val_losses.iter().enumerate().take(max_epochs) {
        last = i + 1;
        es.observe(last, v);
        if es.should_stop() {
            break;
        }
    }
    (last, es.best_epoch)
}

/// Everything that evolves during a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub optimizer: Adam,
    pub stopping: EarlyStopping,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count
    }

    pub fn best_val_loss(&self) -> f64 {
        self.stopping.best_val_loss
    }

    pub fn best_epoch(&self) -> usize {
        self.stopping.best_epoch
    }
}
