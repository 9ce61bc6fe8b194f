//! The meta-learning data plane: corpus ingestion, missing-word task
//! construction, label-word splits and N-way k-shot episode sampling.

mod corpus;
mod io;
mod sampler;
mod split;
mod tasks;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use corpus::{ingest, ingest_path, Corpus, SourceInfo, Vocabulary, BLANK, PAD, UNK};
pub use io::{export_episodes, import_episodes, read_episodes, write_episodes};
pub use sampler::{EpisodeSampler, PairBatch};
pub use split::{effective_sizes, split_vocab, SplitRole, VocabSplit, PAPER_SPLIT_SIZES};
pub use tasks::{
    build_tasks, default_min_occurrences, is_label_candidate, materialize, TaskGroup, TaskIndex,
    TaskInstance, MAX_SENTENCE_TOKENS,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub batch_size: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            batch_size: 20,
        }
    }
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, batch_size: usize) -> Result<Self> {
        let spec = Self {
            n_way,
            k_shot,
            batch_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot < 1 || self.batch_size < 1 {
            return Err(Error::Config(format!(
                "episode needs n_way >= 2, k_shot >= 1, batch_size >= 1 (got {}, {}, {})",
                self.n_way, self.k_shot, self.batch_size
            )));
        }
        Ok(())
    }

    /// Queries per class: the remainder goes to the lowest class indices.
    pub fn query_quota(&self, class: usize) -> usize {
        self.batch_size / self.n_way + usize::from(class < self.batch_size % self.n_way)
    }
}

/// A sentence with its episode-local class. `source` is the corpus
/// sentence it was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub support: Vec<Example>,
    pub query: Vec<Example>,
    /// Label word of each class, by class index.
    pub label_words: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Episode {
    pub fn support_classes(&self) -> Vec<usize> {
        self.support.iter().map(|e| e.class).collect()
    }

    pub fn query_targets(&self) -> Vec<usize> {
        self.query.iter().map(|e| e.class).collect()
    }

    /// Checks balance, class coverage and support/query disjointness.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("episode", msg));
        if self.n_way < 2 || self.k_shot < 1 {
            return bad(format!("n_way {} / k_shot {}", self.n_way, self.k_shot));
        }
        if !self.label_words.is_empty() && self.label_words.len() != self.n_way {
            return bad(format!(
                "{} label words for {} classes",
                self.label_words.len(),
                self.n_way
            ));
        }
        let mut per_class = vec![0; self.n_way];
        for e in &self.support {
            if e.class >= self.n_way {
                return bad(format!("support class {} out of range", e.class));
            }
            if e.tokens.is_empty() {
                return bad("empty support sentence".into());
            }
            per_class[e.class] += 1;
        }
        if let Some(c) = per_class.iter().position(|&n| n != self.k_shot) {
            return bad(format!(
                "class {c} has {} support examples, expected {}",
                per_class[c], self.k_shot
            ));
        }
        if self.query.is_empty() {
            return bad("no queries".into());
        }
        for e in &self.query {
            if e.class >= self.n_way {
                return bad(format!("query class {} not among support classes", e.class));
            }
            if e.tokens.is_empty() {
                return bad("empty query sentence".into());
            }
        }
        let support_sources: HashSet<u32> =
            self.support.iter().filter_map(|e| e.source).collect();
        if self
            .query
            .iter()
            .filter_map(|e| e.source)
            .any(|s| support_sources.contains(&s))
        {
            return bad("a query sentence also appears in the support set".into());
        }
        Ok(())
    }
}
