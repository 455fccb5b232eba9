//! Optimizers, the warmup schedule, gradient accumulation, checkpoints,
//! early stopping, feature masking and the training loop.

mod augment;
mod checkpoint;
mod objective;
mod optim;
mod trainer;

pub use augment::{spec_augment, SpecAugmentConfig};
pub use checkpoint::{average_checkpoints, Checkpoint};
pub use objective::{accumulate_gradients, batch_counts, batch_loss, evaluate, micro_seed, Batch, BatchCounts, Model, ObjectiveConfig};
pub use optim::{clip_grad_norm, grad_norm, noam_lr, AdadeltaParams, AdamParams, OptimizerKind, OptimizerState};
pub use trainer::{
    epoch_checkpoint_path, lm_nll, log_csv, make_batches, train_lm, train_loop, Dataset, LogRow, TrainConfig, TrainOutcome, LOG_HEADER,
};

pub const DEFAULT_MIN_DELTA: f64 = 1e-4;
pub const DEFAULT_PATIENCE: usize = 3;

/// Stops once the dev loss has failed to beat the best value by
/// `min_delta` for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            min_delta: DEFAULT_MIN_DELTA,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's dev loss; true means stop now.
    pub fn update(&mut self, loss: f64) -> bool {
        match self.best {
            Some(b) if loss > b - self.min_delta => self.bad_epochs += 1,
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        self.bad_epochs >= self.patience
    }
}

/// Epoch (1-based) after which training stops for `history`, if any.
pub fn early_stopping(history: &[f64], patience: usize) -> Option<usize> {
    let mut s = EarlyStopping::new(patience);
    history.iter().position(|&l| s.update(l)).map(|i| i + 1)
}

#[cfg(test)]
mod tests;
