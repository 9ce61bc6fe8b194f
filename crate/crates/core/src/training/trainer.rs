use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_params, Checkpoint, CheckpointMeta, RngState};
use super::eval::evaluate;
use super::optim::{clip_global_norm, Optimizer};
use super::{TrainConfig, LOSS_EMA_DECAY};
use crate::autodiff::Graph;
use crate::episodes::{Corpus, Episode, EpisodeSampler, PairBatch, SplitRole, TaskIndex, VocabSplit};
use crate::error::{Error, Result};
use crate::models::{Model, ModelKind};

pub enum TrainBatch {
    Episode(Episode),
    Pairs(PairBatch),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Forward, backward, global-norm clip and one optimiser update.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    batch: &TrainBatch,
    clip_norm: f64,
) -> Result<StepStats> {
    let (loss, mut grads) = {
        let mut g = Graph::with_params(&model.params);
        let root = match batch {
            TrainBatch::Episode(ep) => model.episode_loss(&mut g, ep)?,
            TrainBatch::Pairs(p) => model.pair_loss(&mut g, p)?,
        };
        let loss = g.value(root).item();
        (loss, g.backward(root)?.for_params(&model.params))
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let grad_norm = clip_global_norm(&mut grads, clip_norm);
    optimizer.update(&mut model.params, &grads)?;
    Ok(StepStats { loss, grad_norm })
}

/// Corpus artifacts a run trains and validates on.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub corpus: &'a Corpus,
    pub tasks: &'a TaskIndex,
    pub split: &'a VocabSplit,
}

impl<'a> TrainData<'a> {
    pub fn sampler(&self, role: SplitRole, config: &TrainConfig) -> Result<EpisodeSampler<'a>> {
        EpisodeSampler::new(self.corpus, self.tasks, self.split.words(role), config.spec)
    }
}

/// One line of the training log, written at every evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub val_accuracy: f64,
    pub val_stderr: f64,
    pub wall_seconds: f64,
    /// Whether this evaluation set a new best validation accuracy.
    pub best: bool,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Optimizer,
    rng: ChaCha8Rng,
    pub step: u64,
    pub loss_ema: Option<f64>,
    pub best_val_accuracy: Option<f64>,
    pub best_step: Option<u64>,
    best: Option<Checkpoint>,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model.clone(), vocab_size, config.seed)?;
        let optimizer = Optimizer::new(config.optimizer, &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            model,
            optimizer,
            rng,
            step: 0,
            loss_ema: None,
            best_val_accuracy: None,
            best_step: None,
            best: None,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    /// `steps` may be raised to extend the run.
    pub fn from_checkpoint(ckpt: &Checkpoint, steps: Option<u64>) -> Result<Self> {
        let mut config = ckpt.meta.config.clone();
        if let Some(s) = steps {
            config.steps = s;
        }
        config.validate()?;
        let mut model = Model::init(config.model.clone(), ckpt.meta.vocab_size, 0)?;
        load_params(&mut model, &ckpt.params)?;
        let opt = &ckpt.optimizer;
        let expected = if opt.m.is_empty() { 0 } else { model.params.len() };
        if opt.m.len() != expected || opt.v.len() != opt.m.len() {
            return Err(Error::Integrity("optimizer state does not match the model".into()));
        }
        Ok(Self {
            config,
            model,
            optimizer: opt.clone(),
            rng: ckpt.rng.restore(),
            step: ckpt.meta.step,
            loss_ema: ckpt.meta.loss_ema,
            best_val_accuracy: ckpt.meta.best_val_accuracy,
            best_step: ckpt.meta.best_step,
            best: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                config: self.config.clone(),
                vocab_size: self.model.vocab_size,
                step: self.step,
                loss_ema: self.loss_ema,
                best_val_accuracy: self.best_val_accuracy,
                best_step: self.best_step,
            },
            params: self
                .model
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
                .collect(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Snapshot taken at the best validation accuracy seen by this
    /// process, if any.
    pub fn best_checkpoint(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    fn next_batch(&mut self, sampler: &EpisodeSampler<'_>) -> Result<(TrainBatch, u64)> {
        let seed = self.rng.next_u64();
        let batch = if self.model.kind() == ModelKind::Siamese {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            TrainBatch::Pairs(sampler.sample_pairs(&mut r, self.config.spec.batch_size)?)
        } else {
            TrainBatch::Episode(sampler.sample_seeded(seed)?)
        };
        Ok((batch, seed))
    }

    /// One training step on the next sampled batch.
    pub fn step_once(&mut self, sampler: &EpisodeSampler<'_>) -> Result<StepStats> {
        let (batch, seed) = self.next_batch(sampler)?;
        let step = self.step + 1;
        let stats = train_step(&mut self.model, &mut self.optimizer, &batch, self.config.clip_norm)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step, seed },
                other => other,
            })?;
        self.step = step;
        self.loss_ema = Some(match self.loss_ema {
            None => stats.loss,
            Some(ema) => LOSS_EMA_DECAY * ema + (1.0 - LOSS_EMA_DECAY) * stats.loss,
        });
        Ok(stats)
    }

    /// Trains until `config.steps`, evaluating on the validation split
    /// every `eval_every` steps and at the last step. `on_eval` sees each
    /// log record together with the trainer. Returns the per-step losses.
    pub fn run(
        &mut self,
        data: TrainData<'_>,
        mut on_eval: impl FnMut(&LogRecord, &Trainer) -> Result<()>,
    ) -> Result<Vec<f64>> {
        let train = data.sampler(SplitRole::Train, &self.config)?;
        let val = data.sampler(SplitRole::Validation, &self.config)?;
        let start = Instant::now();
        let mut losses = Vec::new();
        while self.step < self.config.steps {
            losses.push(self.step_once(&train)?.loss);
            if self.step.is_multiple_of(self.config.eval_every) || self.step == self.config.steps {
                let report = evaluate(
                    &self.model,
                    &val,
                    self.config.eval_episodes,
                    self.config.eval_seed,
                )?;
                let best = self.best_val_accuracy.is_none_or(|b| report.accuracy > b);
                if best {
                    self.best_val_accuracy = Some(report.accuracy);
                    self.best_step = Some(self.step);
                }
                let record = LogRecord {
                    step: self.step,
                    loss: self.loss_ema.unwrap_or(f64::NAN),
                    val_accuracy: report.accuracy,
                    val_stderr: report.stderr,
                    wall_seconds: start.elapsed().as_secs_f64(),
                    best,
                };
                if best {
                    self.best = Some(self.checkpoint());
                }
                on_eval(&record, self)?;
            }
        }
        Ok(losses)
    }
}

#[cfg(test)]
mod tests;
