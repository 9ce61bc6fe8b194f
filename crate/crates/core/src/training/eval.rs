use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episodes::{Episode, EpisodeSampler, SplitRole};
use crate::error::{Error, Result};
use crate::models::{Model, ModelKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelKind,
    pub metric: String,
    pub n_way: usize,
    pub k_shot: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitRole>,
    pub episodes: usize,
    pub accuracy: f64,
    pub stderr: f64,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(model: &Model, n_way: usize, k_shot: usize, per_episode: Vec<f64>) -> Result<Self> {
        let (accuracy, stderr) = mean_and_stderr(&per_episode)?;
        Ok(Self {
            model: model.kind(),
            metric: model.config.metric.to_string(),
            n_way,
            k_shot,
            split: None,
            episodes: per_episode.len(),
            accuracy,
            stderr,
            per_episode,
        })
    }

    /// Table cell, e.g. `28.6 ± 0.2%`.
    pub fn cell(&self) -> String {
        format!("{:.1} ± {:.1}%", 100.0 * self.accuracy, 100.0 * self.stderr)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({}, {}-way {}-shot, {} episodes)",
            self.cell(),
            self.model,
            self.n_way,
            self.k_shot,
            self.episodes
        )
    }
}

/// Mean and `sample std / √n` (zero for a single value).
fn mean_and_stderr(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::Empty { op: "evaluate" });
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt() / n.sqrt()))
}

/// Seed of the `i`-th episode of a suite.
pub fn episode_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add(i as u64)
}

/// The fixed episode suite `base, base + 1, …` drawn by `sampler`.
pub fn sample_suite(sampler: &EpisodeSampler<'_>, episodes: usize, base: u64) -> Result<Vec<Episode>> {
    (0..episodes)
        .map(|i| sampler.sample_seeded(episode_seed(base, i)))
        .collect()
}

/// Accuracy over a seeded suite of fresh episodes. Episodes are scored in
/// parallel against the unchanged parameters and reduced in suite order.
pub fn evaluate(model: &Model, sampler: &EpisodeSampler<'_>, episodes: usize, base_seed: u64) -> Result<EvalReport> {
    let accs = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let ep = sampler.sample_seeded(episode_seed(base_seed, i))?;
            model.episode_accuracy(&ep)
        })
        .collect::<Result<Vec<f64>>>()?;
    let spec = sampler.spec();
    EvalReport::from_accuracies(model, spec.n_way, spec.k_shot, accs)
}

/// Accuracy over a fixed list of episodes, e.g. one read from a file.
pub fn evaluate_episodes(model: &Model, episodes: &[Episode]) -> Result<EvalReport> {
    let first = episodes.first().ok_or(Error::Empty { op: "evaluate" })?;
    let accs = episodes
        .par_iter()
        .map(|ep| model.episode_accuracy(ep))
        .collect::<Result<Vec<f64>>>()?;
    EvalReport::from_accuracies(model, first.n_way, first.k_shot, accs)
}
