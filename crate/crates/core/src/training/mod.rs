//! Prefix-LM finetuning: masked loss, Adam with role-based freezing,
//! checkpoint averaging and the deterministic training loop.
//!
//! All randomness of a run derives from [`TrainConfig::seed`] through named
//! sub-streams: `init` for parameters, and per step `data`, `dropout` and
//! `routing-noise`. Step `s` (1-based) always draws the same batch and
//! dropout masks, which is what lets a logged loss be replayed from a
//! checkpoint.

mod average;
mod batch;
mod optim;
mod run;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use average::{average_checkpoints, average_params};
pub use batch::{loss_fn, Batch, Example, LossParts, TaskMixture, IGNORE};
pub use optim::{adam_step, freeze_mask, AdamState};
pub use run::{replay_loss, sample_batch, train, LayerUsage, RunArtifacts, StepMetrics};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMode {
    None,
    FreezeGate,
    FreezeExpert,
    FreezeMoe,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub freeze_mode: FreezeMode,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0: only the final one).
    pub checkpoint_every: usize,
    /// Average the last this many saved checkpoints into the final model
    /// (1: no averaging).
    pub average_last_n: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            steps: 2000,
            adam: AdamConfig::default(),
            freeze_mode: FreezeMode::None,
            seed: 0,
            checkpoint_every: 0,
            average_last_n: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("train.adam: betas must be in [0, 1) and eps positive".into());
        }
        if self.average_last_n == 0 {
            return bad("train.average_last_n must be at least 1".into());
        }
        Ok(())
    }
}
