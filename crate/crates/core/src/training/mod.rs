//! Episodic training, evaluation and checkpoints.
//!
//! A [`Trainer`] owns the model, the optimiser and the generator that
//! draws training episodes, so its whole state fits in a [`Checkpoint`]
//! and an interrupted run can continue exactly where it stopped.

mod checkpoint;
mod eval;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_params, Checkpoint, CheckpointMeta, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{episode_seed, evaluate, evaluate_episodes, sample_suite, EvalReport};
pub use optim::{clip_global_norm, global_norm, Optimizer, OptimizerConfig};
pub use trainer::{train_step, LogRecord, StepStats, TrainBatch, TrainData, Trainer};

use crate::episodes::EpisodeSpec;
use crate::error::{Error, Result};
use crate::models::ModelConfig;

pub const DEFAULT_TEST_EPISODES: usize = 1000;
pub const LOSS_EMA_DECAY: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub spec: EpisodeSpec,
    pub steps: u64,
    pub optimizer: OptimizerConfig,
    pub clip_norm: f64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub seed: u64,
    /// Base seed of the validation episode suite.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            spec: EpisodeSpec::default(),
            steps: 30_000,
            optimizer: OptimizerConfig::default(),
            clip_norm: 5.0,
            eval_every: 500,
            eval_episodes: 200,
            seed: 1,
            eval_seed: 1_000_000,
        }
    }
}

impl TrainConfig {
    /// Every problem found, not only the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in [
            self.model.validate(),
            self.spec.validate(),
            self.optimizer.validate(),
        ] {
            if let Err(e) = r {
                out.push(e.to_string());
            }
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            out.push(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.eval_every == 0 {
            out.push("eval_every must be at least 1".into());
        }
        if self.eval_episodes == 0 {
            out.push("eval_episodes must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
