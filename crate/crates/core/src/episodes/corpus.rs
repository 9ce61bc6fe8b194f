use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BLANK: u32 = 2;
pub const SPECIAL_TOKENS: [&str; 3] = ["<pad>", "<unk>", "<blank>"];

const TERMINATORS: [char; 3] = ['.', '!', '?'];

/// Token ↔ id map with corpus frequencies. Ids 0..3 are the special
/// tokens; the corpus's own `<unk>` maps onto [`UNK`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    counts: Vec<u64>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        let index = r
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens: r.tokens,
            counts: r.counts,
            index,
        }
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            tokens: v.tokens,
            counts: v.counts,
        }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
        };
        for t in SPECIAL_TOKENS {
            v.intern(t);
        }
        v
    }

    fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.counts.push(0);
        self.index.insert(token.to_string(), id);
        id
    }

    fn observe(&mut self, token: &str) -> u32 {
        let id = self.intern(token);
        self.counts[id as usize] += 1;
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`] when it was never seen.
    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    /// Encodes whitespace-separated text, lowercasing like ingestion does.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|t| {
                if t == "_" || t == "<blank>" {
                    BLANK
                } else {
                    self.id_or_unk(&t.to_lowercase())
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub path: Option<String>,
    pub lines: usize,
    pub heading_lines: usize,
    pub blank_lines: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub sentences: Vec<Vec<u32>>,
    pub source: SourceInfo,
}

fn is_heading(line: &str) -> bool {
    let t = line.trim();
    t.len() >= 2 && t.starts_with('=') && t.ends_with('=')
}

/// Reads a WikiText-style corpus: headings and blank lines are dropped,
/// the rest is lowercased, whitespace-tokenised and split into sentences
/// at `.`, `!` and `?`.
pub fn ingest<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut vocab = Vocabulary::new();
    let mut sentences = Vec::new();
    let mut source = SourceInfo::default();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        source.lines += 1;
        if line.trim().is_empty() {
            source.blank_lines += 1;
            continue;
        }
        if is_heading(&line) {
            source.heading_lines += 1;
            continue;
        }
        let mut current: Vec<u32> = Vec::new();
        for raw in line.split_whitespace() {
            let lower = raw.to_lowercase();
            let word = lower.trim_end_matches(TERMINATORS);
            let ends_sentence = word.len() != lower.len();
            if !word.is_empty() {
                current.push(vocab.observe(word));
                source.tokens += 1;
            }
            if ends_sentence && !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            sentences.push(current);
        }
    }
    if sentences.is_empty() {
        return Err(Error::Config(
            "corpus contains no sentences after filtering".into(),
        ));
    }
    Ok(Corpus {
        vocab,
        sentences,
        source,
    })
}

pub fn ingest_path(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut corpus = ingest(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    corpus.source.path = Some(path.display().to_string());
    Ok(corpus)
}

impl Corpus {
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| {
                if i == BLANK {
                    "_"
                } else {
                    self.vocab.token(i)
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}
