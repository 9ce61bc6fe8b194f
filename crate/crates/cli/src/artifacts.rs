//! Corpus, task index and vocabulary split, cached in the run directory.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fewshot_core::episodes::{build_tasks, ingest, split_vocab, Corpus, SplitRole, TaskIndex, VocabSplit};
use fewshot_core::training::TrainData;

use crate::config::{RunConfig, SplitConfig};
use crate::Failure;

pub const CORPUS_FILE: &str = "corpus.json";
pub const TASKS_FILE: &str = "tasks.json";
pub const SPLIT_FILE: &str = "split.json";
pub const STATS_FILE: &str = "stats.json";
const MANIFEST_FILE: &str = "artifacts.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    corpus_sha256: String,
    min_occurrences: usize,
    split: Option<SplitConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub corpus: PathBuf,
    pub sentences: usize,
    pub tokens: usize,
    pub vocab_size: usize,
    pub min_occurrences: usize,
    pub eligible_words: usize,
    pub task_instances: usize,
    /// `(bucket, words)` with buckets of instances per eligible word.
    pub instance_histogram: Vec<(String, usize)>,
}

const BUCKETS: [(usize, usize); 7] = [
    (1, 2),
    (3, 4),
    (5, 9),
    (10, 19),
    (20, 49),
    (50, 99),
    (100, usize::MAX),
];

impl CorpusStats {
    pub fn new(path: &Path, corpus: &Corpus, tasks: &TaskIndex) -> Self {
        let instance_histogram = BUCKETS
            .iter()
            .map(|&(lo, hi)| {
                let label = if hi == usize::MAX { format!("{lo}+") } else { format!("{lo}-{hi}") };
                let n = tasks
                    .groups
                    .iter()
                    .filter(|g| (lo..=hi).contains(&g.instances.len()))
                    .count();
                (label, n)
            })
            .filter(|(_, n)| *n > 0)
            .collect();
        Self {
            corpus: path.to_path_buf(),
            sentences: corpus.sentences.len(),
            tokens: corpus.sentences.iter().map(Vec::len).sum(),
            vocab_size: corpus.vocab.len(),
            min_occurrences: tasks.min_occurrences,
            eligible_words: tasks.groups.len(),
            task_instances: tasks.groups.iter().map(|g| g.instances.len()).sum(),
            instance_histogram,
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "corpus            {}\nsentences         {}\ntokens            {}\nvocabulary        {}\nmin occurrences   {}\neligible words    {}\ntask instances    {}\ninstances per word:\n",
            self.corpus.display(),
            self.sentences,
            self.tokens,
            self.vocab_size,
            self.min_occurrences,
            self.eligible_words,
            self.task_instances,
        );
        for (bucket, n) in &self.instance_histogram {
            out.push_str(&format!("  {bucket:>8}  {n}\n"));
        }
        out
    }
}

pub struct Artifacts {
    pub corpus: Corpus,
    pub tasks: TaskIndex,
    pub split: Option<VocabSplit>,
    pub stats: CorpusStats,
}

impl Artifacts {
    pub fn data(&self) -> TrainData<'_> {
        TrainData {
            corpus: &self.corpus,
            tasks: &self.tasks,
            split: self.split.as_ref().expect("split prepared"),
        }
    }

    pub fn words(&self, role: SplitRole) -> &[u32] {
        self.split.as_ref().expect("split prepared").words(role)
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("corrupt artifact {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_corpus_bytes(path: &Path) -> Result<Vec<u8>, Failure> {
    if !path.is_file() {
        return Err(Failure::usage(format!("corpus file not found: {}", path.display())));
    }
    std::fs::read(path)
        .with_context(|| format!("cannot read corpus {}", path.display()))
        .map_err(Failure::Usage)
}

/// Loads the cached artifacts when they were built from the same corpus
/// bytes and settings, otherwise rebuilds and stores them. The split is
/// only prepared when `with_split` is set.
pub fn prepare(cfg: &RunConfig, dir: &Path, with_split: bool) -> Result<Artifacts, Failure> {
    let bytes = read_corpus_bytes(&cfg.corpus)?;
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(Failure::Runtime)?;
    let min_occurrences = cfg.min_occurrences();
    let sha = format!("{:x}", Sha256::digest(&bytes));
    let manifest_path = dir.join(MANIFEST_FILE);
    let cached: Option<Manifest> = read_json(&manifest_path).ok();
    let same_corpus = cached
        .as_ref()
        .is_some_and(|m| m.corpus_sha256 == sha && m.min_occurrences == min_occurrences);

    let (corpus, tasks) = if same_corpus {
        (
            read_json::<Corpus>(&dir.join(CORPUS_FILE)).map_err(Failure::Runtime)?,
            read_json::<TaskIndex>(&dir.join(TASKS_FILE)).map_err(Failure::Runtime)?,
        )
    } else {
        let corpus = ingest(bytes.as_slice()).map_err(Failure::from_core)?;
        let tasks = build_tasks(&corpus, min_occurrences).map_err(Failure::from_core)?;
        write_json(&dir.join(CORPUS_FILE), &corpus).map_err(Failure::Runtime)?;
        write_json(&dir.join(TASKS_FILE), &tasks).map_err(Failure::Runtime)?;
        (corpus, tasks)
    };
    let stats = CorpusStats::new(&cfg.corpus, &corpus, &tasks);
    write_json(&dir.join(STATS_FILE), &stats).map_err(Failure::Runtime)?;

    let mut split_cfg = cached.filter(|_| same_corpus).and_then(|m| m.split);
    let split = if with_split {
        let split = if split_cfg.as_ref() == Some(&cfg.split) {
            read_json::<VocabSplit>(&dir.join(SPLIT_FILE)).map_err(Failure::Runtime)?
        } else {
            let s = &cfg.split;
            let split = split_vocab(&tasks, s.sizes, s.seed, s.min_per_split).map_err(Failure::from_core)?;
            write_json(&dir.join(SPLIT_FILE), &split).map_err(Failure::Runtime)?;
            split_cfg = Some(cfg.split.clone());
            split
        };
        Some(split)
    } else {
        None
    };
    let manifest = Manifest {
        corpus_sha256: sha,
        min_occurrences,
        split: split_cfg,
    };
    write_json(&manifest_path, &manifest).map_err(Failure::Runtime)?;
    Ok(Artifacts {
        corpus,
        tasks,
        split,
        stats,
    })
}
