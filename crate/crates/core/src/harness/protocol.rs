use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer settings plus the early-stopping schedule: after `patience`
/// epochs without a validation improvement the weights revert to the best
/// checkpoint and the learning rate is multiplied by `lr_decay_factor`; the
/// run ends when that would exceed `max_decay_steps` or at `max_epochs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProtocol {
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_decay")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_decay_steps")]
    pub max_decay_steps: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
}

fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch() -> usize {
    32
}
fn default_patience() -> usize {
    5
}
fn default_decay() -> f64 {
    0.1
}
fn default_decay_steps() -> usize {
    2
}
fn default_max_epochs() -> usize {
    30
}

impl Default for TrainProtocol {
    fn default() -> Self {
        Self {
            base_lr: default_lr(),
            momentum: default_momentum(),
            batch_size: default_batch(),
            patience: default_patience(),
            lr_decay_factor: default_decay(),
            max_decay_steps: default_decay_steps(),
            max_epochs: default_max_epochs(),
        }
    }
}

impl TrainProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::InvalidArgument("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::InvalidArgument("lr_decay_factor must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Something the early-stopping loop can drive.
pub trait Trainable {
    type Snapshot;

    /// One pass over the training data.
    fn train_epoch(&mut self, lr: f64) -> Result<f64>;

    /// Validation loss including every auxiliary and regularization term of
    /// the method, or `None` when there is no validation data.
    fn validation_loss(&mut self) -> Result<Option<f64>>;

    fn snapshot(&self) -> Self::Snapshot;

    fn restore(&mut self, snapshot: &Self::Snapshot);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopReport {
    pub epochs: usize,
    pub decay_steps: usize,
    /// 1-based epoch whose weights were returned.
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub final_lr: f64,
}

/// Runs the early-stopping schedule and leaves `model` at the best
/// checkpoint observed. Without validation data it trains for `max_epochs`
/// and keeps the final weights.
pub fn early_stop_loop<T: Trainable>(model: &mut T, protocol: &TrainProtocol) -> Result<EarlyStopReport> {
    protocol.validate()?;
    let mut lr = protocol.base_lr;
    let mut best: Option<(f64, usize, T::Snapshot)> = None;
    let mut since_best = 0;
    let mut decays = 0;
    let mut epochs = 0;
    let mut warned = false;

    while epochs < protocol.max_epochs {
        model.train_epoch(lr)?;
        epochs += 1;
        let Some(val) = model.validation_loss()? else {
            if !warned {
                log::warn!("empty validation split, training for a fixed {} epochs", protocol.max_epochs);
                warned = true;
            }
            continue;
        };
        let improved = best.as_ref().is_none_or(|(b, _, _)| val < *b);
        if improved {
            best = Some((val, epochs, model.snapshot()));
            since_best = 0;
            continue;
        }
        since_best += 1;
        if since_best >= protocol.patience {
            if decays >= protocol.max_decay_steps {
                break;
            }
            if let Some((_, _, snap)) = &best {
                model.restore(snap);
            }
            lr *= protocol.lr_decay_factor;
            decays += 1;
            since_best = 0;
        }
    }

    let (best_val_loss, best_epoch) = match best {
        Some((loss, epoch, snap)) => {
            model.restore(&snap);
            (Some(loss), epoch)
        }
        None => (None, epochs),
    };
    Ok(EarlyStopReport {
        epochs,
        decay_steps: decays,
        best_epoch,
        best_val_loss,
        final_lr: lr,
    })
}
