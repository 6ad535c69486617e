//! Loss, optimiser, learning-rate schedule and the training loop.

mod loss;
mod optim;
mod schedule;
mod trainer;

use serde::{Deserialize, Serialize};

pub use loss::{compute_loss, frame_target, LossOutput, LossReport, HEAD_NAMES};
pub use optim::{clip_grad_norm, AdamW};
pub use schedule::{lr_at, lr_at_fractional};
pub use trainer::{
    example_gradients, sample_epoch, total_steps, train, EpochEnd, MetricsRecord, RecordKind,
    Sample, TrainOutcome,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `[past, anticipation, present]`
    pub loss_weights: [f64; 3],
    pub seed: u64,
    /// Global-norm clipping threshold; `0` disables clipping.
    pub grad_clip: f64,
    /// Training samples drawn from each video per epoch.
    pub samples_per_video: usize,
    /// Evaluate on the test split every this many epochs; `0` disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 5e-5,
            weight_decay: 5e-5,
            warmup_fraction: 0.4,
            batch_size: 16,
            epochs: 25,
            loss_weights: [1.0, 1.0, 1.0],
            seed: 0,
            grad_clip: 1.0,
            samples_per_video: 1,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return fail(format!(
                "warmup_fraction must lie in (0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if self
            .loss_weights
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return fail(format!(
                "loss_weights must be finite and >= 0, got {:?}",
                self.loss_weights
            ));
        }
        if self.loss_weights.iter().all(|w| *w == 0.0) {
            return fail("loss_weights must not all be zero".into());
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return fail(format!(
                "peak_lr must be finite and >= 0, got {}",
                self.peak_lr
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return fail(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.samples_per_video == 0 {
            return fail("batch_size, epochs and samples_per_video must be positive".into());
        }
        Ok(())
    }
}
