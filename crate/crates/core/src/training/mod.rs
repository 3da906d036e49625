//! Optimization: warmup schedule, Adam, token-count accumulation, the
//! training loop and encoder transfer between tasks.

mod accum;
mod adam;
mod trainer;

pub use accum::{Accumulated, GradAccumulator};
pub use adam::{Adam, AdamConfig};
pub use trainer::{
    evaluate_perplexity, pretrain_then_reinit, reinit_decoder, LogEntry, StopReason, TrainReport, Trainer,
    TransferOutcome,
};

use crate::error::{config_err, Error, Result};
use serde::{Deserialize, Serialize};

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Input("learning-rate steps start at 1".into()));
    }
    if warmup == 0 || d_model == 0 {
        return Err(config_err("warmup and d_model must be positive"));
    }
    let s = step as f64;
    let rise = s * (warmup as f64).powf(-1.5);
    let decay = s.powf(-0.5);
    Ok((d_model as f64).powf(-0.5) * rise.min(decay))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub warmup_steps: u64,
    /// Multiplier on the warmup schedule.
    pub lr_scale: f64,
    pub max_steps: u64,
    /// An update fires once this many target tokens have been accumulated.
    pub accum_target_tokens: usize,
    /// Padded-size budgets for one micro-batch.
    pub batch_tokens: usize,
    pub batch_frames: usize,
    pub label_smoothing: f64,
    /// Validation perplexity cadence, in updates.
    pub eval_every: u64,
    /// In-memory checkpoint cadence, in updates.
    pub checkpoint_every: u64,
    /// Number of lowest-perplexity checkpoints kept for averaging.
    pub keep_best: usize,
    pub clip_norm: Option<f64>,
    /// Stop as soon as an update's per-token training loss drops below this.
    pub target_loss: Option<f64>,
    pub spec_augment: bool,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            warmup_steps: 400,
            lr_scale: 1.0,
            max_steps: 4000,
            accum_target_tokens: 400,
            batch_tokens: 400,
            batch_frames: 4000,
            label_smoothing: 0.1,
            eval_every: 500,
            checkpoint_every: 500,
            keep_best: 10,
            clip_norm: None,
            target_loss: None,
            spec_augment: false,
            seed: 1,
        }
    }
}

impl TrainSchedule {
    /// Full-size recipe: 4096 warmup updates, at most 120k updates of 12k target tokens.
    pub fn large() -> Self {
        Self {
            warmup_steps: 4096,
            max_steps: 120_000,
            accum_target_tokens: 12_000,
            batch_tokens: 12_000,
            batch_frames: 200_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(config_err("warmup_steps must be >= 1"));
        }
        if self.accum_target_tokens == 0 || self.batch_tokens == 0 || self.batch_frames == 0 {
            return Err(config_err("token and frame budgets must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(config_err(format!(
                "label_smoothing {} not in [0, 1)",
                self.label_smoothing
            )));
        }
        if self.lr_scale.is_nan() || self.lr_scale <= 0.0 {
            return Err(config_err("lr_scale must be positive"));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(config_err("eval and checkpoint cadences must be >= 1"));
        }
        Ok(())
    }

    pub fn lr(&self, step: u64, d_model: usize) -> Result<f64> {
        Ok(self.lr_scale * noam_lr(step, d_model, self.warmup_steps)?)
    }
}
