use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::Corpus;
use super::tasks::{materialize, TaskGroup, TaskIndex, TaskInstance};
use super::{Episode, EpisodeSpec, Example};
use crate::error::{Error, Result};

/// Draws N-way k-shot episodes from one split's label words.
pub struct EpisodeSampler<'a> {
    corpus: &'a Corpus,
    groups: Vec<&'a TaskGroup>,
    spec: EpisodeSpec,
}

/// Sentence pairs for same/different verification; `labels[i]` is 1.0
/// when both sentences share a label word.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub left: Vec<Vec<u32>>,
    pub right: Vec<Vec<u32>>,
    pub labels: Vec<f64>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(
        corpus: &'a Corpus,
        tasks: &'a TaskIndex,
        words: &[u32],
        spec: EpisodeSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let groups = words
            .iter()
            .map(|&w| {
                tasks.group(w).ok_or_else(|| {
                    Error::Config(format!(
                        "label word '{}' has no task instances",
                        corpus.vocab.token(w)
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if groups.len() < spec.n_way {
            return Err(Error::Config(format!(
                "{}-way episodes need at least {} label words, split has {}",
                spec.n_way,
                spec.n_way,
                groups.len()
            )));
        }
        Ok(Self {
            corpus,
            groups,
            spec,
        })
    }

    pub fn spec(&self) -> EpisodeSpec {
        self.spec
    }

    /// Episode drawn from a generator seeded with `seed`; the seed is
    /// recorded on the episode.
    pub fn sample_seeded(&self, seed: u64) -> Result<Episode> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ep = self.sample(&mut rng)?;
        ep.seed = Some(seed);
        Ok(ep)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Episode> {
        let EpisodeSpec {
            n_way,
            k_shot,
            batch_size: _,
        } = self.spec;
        let chosen: Vec<&TaskGroup> = index::sample(rng, self.groups.len(), n_way)
            .into_iter()
            .map(|i| self.groups[i])
            .collect();

        let mut used: HashSet<u32> = HashSet::new();
        let mut support = Vec::with_capacity(n_way * k_shot);
        for (class, group) in chosen.iter().enumerate() {
            let mut order: Vec<&TaskInstance> = group.instances.iter().collect();
            order.shuffle(rng);
            let mut taken = 0;
            for inst in order {
                if taken == k_shot {
                    break;
                }
                if used.insert(inst.sentence) {
                    support.push(self.example(inst, class));
                    taken += 1;
                }
            }
            if taken < k_shot {
                return Err(self.insufficient(
                    group,
                    format!("only {taken} unused sentences for {k_shot} support examples"),
                ));
            }
        }

        let mut query = Vec::with_capacity(self.spec.batch_size);
        for (class, group) in chosen.iter().enumerate() {
            let mut candidates: Vec<&TaskInstance> = group
                .instances
                .iter()
                .filter(|i| !used.contains(&i.sentence))
                .collect();
            if candidates.is_empty() {
                return Err(self.insufficient(
                    group,
                    "no sentence left for queries after the support set".into(),
                ));
            }
            candidates.shuffle(rng);
            let quota = self.spec.query_quota(class);
            query.extend(
                candidates
                    .iter()
                    .cycle()
                    .take(quota)
                    .map(|inst| self.example(inst, class)),
            );
        }

        support.shuffle(rng);
        query.shuffle(rng);
        Ok(Episode {
            n_way,
            k_shot,
            support,
            query,
            label_words: chosen
                .iter()
                .map(|g| self.corpus.vocab.token(g.word).to_string())
                .collect(),
            seed: None,
        })
    }

    /// `n` pairs, the first half same-word, the rest different-word,
    /// returned in shuffled order.
    pub fn sample_pairs<R: Rng>(&self, rng: &mut R, n: usize) -> Result<PairBatch> {
        let mut pairs = Vec::with_capacity(n);
        for i in 0..n {
            if i < n / 2 {
                let group = self.groups[rng.gen_range(0..self.groups.len())];
                let picks = index::sample(rng, group.instances.len(), group.instances.len());
                let a = &group.instances[picks.index(0)];
                let b = picks
                    .iter()
                    .map(|j| &group.instances[j])
                    .find(|b| b.sentence != a.sentence)
                    .ok_or_else(|| {
                        self.insufficient(group, "needs two distinct sentences".into())
                    })?;
                pairs.push((materialize(self.corpus, a), materialize(self.corpus, b), 1.0));
            } else {
                let two = index::sample(rng, self.groups.len(), 2);
                let (ga, gb) = (self.groups[two.index(0)], self.groups[two.index(1)]);
                let a = &ga.instances[rng.gen_range(0..ga.instances.len())];
                let b = gb
                    .instances
                    .iter()
                    .filter(|b| b.sentence != a.sentence)
                    .collect::<Vec<_>>()
                    .choose(rng)
                    .copied()
                    .ok_or_else(|| self.insufficient(gb, "no sentence distinct from its pair".into()))?;
                pairs.push((materialize(self.corpus, a), materialize(self.corpus, b), 0.0));
            }
        }
        pairs.shuffle(rng);
        let mut batch = PairBatch {
            left: Vec::with_capacity(n),
            right: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
        };
        for (a, b, y) in pairs {
            batch.left.push(a);
            batch.right.push(b);
            batch.labels.push(y);
        }
        Ok(batch)
    }

    fn example(&self, inst: &TaskInstance, class: usize) -> Example {
        Example {
            tokens: materialize(self.corpus, inst),
            class,
            source: Some(inst.sentence),
        }
    }

    fn insufficient(&self, group: &TaskGroup, msg: String) -> Error {
        Error::Insufficient {
            word: self.corpus.vocab.token(group.word).to_string(),
            msg,
        }
    }
}
