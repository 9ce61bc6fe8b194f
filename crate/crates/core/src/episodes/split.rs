use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tasks::TaskIndex;
use crate::error::{Error, Result};

pub const PAPER_SPLIT_SIZES: [usize; 3] = [9000, 1000, 1000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Validation,
    Test,
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitRole::Train => "train",
            SplitRole::Validation => "validation",
            SplitRole::Test => "test",
        })
    }
}

impl FromStr for SplitRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitRole::Train),
            "validation" | "val" => Ok(SplitRole::Validation),
            "test" => Ok(SplitRole::Test),
            _ => Err(Error::Config(format!(
                "unknown split '{s}'; expected train, validation or test"
            ))),
        }
    }
}

/// Disjoint label-word sets, each sorted by word id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSplit {
    pub train: Vec<u32>,
    pub validation: Vec<u32>,
    pub test: Vec<u32>,
    pub seed: u64,
}

impl VocabSplit {
    pub fn words(&self, role: SplitRole) -> &[u32] {
        match role {
            SplitRole::Train => &self.train,
            SplitRole::Validation => &self.validation,
            SplitRole::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }
}

/// Sizes actually used for `available` eligible words. When the request
/// does not fit, the requested ratio is kept: validation and test get
/// `round(available * r)` each and training gets the rest.
pub fn effective_sizes(available: usize, requested: [usize; 3]) -> [usize; 3] {
    let total: usize = requested.iter().sum();
    if available >= total {
        return requested;
    }
    let share = |r: usize| ((available * r) as f64 / total as f64).round() as usize;
    let (val, test) = (share(requested[1]), share(requested[2]));
    [available.saturating_sub(val + test), val, test]
}

/// Seeded uniform sample of label words without replacement.
/// `min_per_split` is the smallest split that can still form an episode.
pub fn split_vocab(
    tasks: &TaskIndex,
    sizes: [usize; 3],
    seed: u64,
    min_per_split: usize,
) -> Result<VocabSplit> {
    let mut words = tasks.words();
    let sizes = effective_sizes(words.len(), sizes);
    let roles = [SplitRole::Train, SplitRole::Validation, SplitRole::Test];
    if let Some((role, n)) = roles.iter().zip(sizes).find(|(_, n)| *n < min_per_split) {
        return Err(Error::Config(format!(
            "{} eligible label words give a {role} split of {n} words; at least {min_per_split} needed",
            words.len(),
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    words.shuffle(&mut rng);
    let take = |n: usize, from: &mut Vec<u32>| {
        let mut part: Vec<u32> = from.drain(..n).collect();
        part.sort_unstable();
        part
    };
    let train = take(sizes[0], &mut words);
    let validation = take(sizes[1], &mut words);
    let test = take(sizes[2], &mut words);
    Ok(VocabSplit {
        train,
        validation,
        test,
        seed,
    })
}
