use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Vocabulary, BLANK, UNK};
use crate::error::{Error, Result};

/// Longest sentence fed to the encoders, centred on the blank.
pub const MAX_SENTENCE_TOKENS: usize = 48;

/// One occurrence of a label word: `sentence[position]` is the word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub label: u32,
    pub sentence: u32,
    pub position: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGroup {
    pub word: u32,
    pub instances: Vec<TaskInstance>,
    pub distinct_sentences: usize,
}

/// All eligible label words with their task instances, ordered by word id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskIndex {
    pub min_occurrences: usize,
    pub groups: Vec<TaskGroup>,
}

/// Label words are alphabetic, at least two characters, and not a
/// special token.
pub fn is_label_candidate(vocab: &Vocabulary, id: u32) -> bool {
    if Vocabulary::is_special(id) || id == UNK {
        return false;
    }
    let t = vocab.token(id);
    t.chars().count() >= 2 && t.chars().all(char::is_alphabetic)
}

/// Default eligibility threshold: enough distinct sentences for `k`
/// supports plus queries, never below 3.
pub fn default_min_occurrences(max_k: usize) -> usize {
    (max_k + 2).max(3)
}

pub fn build_tasks(corpus: &Corpus, min_occurrences: usize) -> Result<TaskIndex> {
    if min_occurrences < 2 {
        return Err(Error::invalid(
            "build_tasks",
            format!("min_occurrences must be at least 2, got {min_occurrences}"),
        ));
    }
    let mut by_word: BTreeMap<u32, Vec<TaskInstance>> = BTreeMap::new();
    for (s, sentence) in corpus.sentences.iter().enumerate() {
        for (p, &w) in sentence.iter().enumerate() {
            if is_label_candidate(&corpus.vocab, w) {
                by_word.entry(w).or_default().push(TaskInstance {
                    label: w,
                    sentence: s as u32,
                    position: p as u32,
                });
            }
        }
    }
    let groups = by_word
        .into_iter()
        .filter_map(|(word, instances)| {
            let mut distinct = 1;
            for pair in instances.windows(2) {
                if pair[0].sentence != pair[1].sentence {
                    distinct += 1;
                }
            }
            (distinct >= min_occurrences).then_some(TaskGroup {
                word,
                instances,
                distinct_sentences: distinct,
            })
        })
        .collect();
    Ok(TaskIndex {
        min_occurrences,
        groups,
    })
}

impl TaskIndex {
    pub fn group(&self, word: u32) -> Option<&TaskGroup> {
        self.groups
            .binary_search_by_key(&word, |g| g.word)
            .ok()
            .map(|i| &self.groups[i])
    }

    pub fn words(&self) -> Vec<u32> {
        self.groups.iter().map(|g| g.word).collect()
    }

    pub fn instance_count(&self) -> usize {
        self.groups.iter().map(|g| g.instances.len()).sum()
    }

    /// Histogram of distinct-sentence counts per label word.
    pub fn histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for g in &self.groups {
            *h.entry(g.distinct_sentences).or_insert(0) += 1;
        }
        h
    }
}

/// Token ids of the instance's sentence with the label blanked, cut to
/// [`MAX_SENTENCE_TOKENS`] around the blank.
pub fn materialize(corpus: &Corpus, inst: &TaskInstance) -> Vec<u32> {
    let sentence = &corpus.sentences[inst.sentence as usize];
    let pos = inst.position as usize;
    let len = sentence.len();
    let start = if len > MAX_SENTENCE_TOKENS {
        pos.saturating_sub(MAX_SENTENCE_TOKENS / 2)
            .min(len - MAX_SENTENCE_TOKENS)
    } else {
        0
    };
    let end = (start + MAX_SENTENCE_TOKENS).min(len);
    sentence[start..end]
        .iter()
        .enumerate()
        .map(|(i, &t)| if start + i == pos { BLANK } else { t })
        .collect()
}
