use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use fewshot_core::episodes::{default_min_occurrences, PAPER_SPLIT_SIZES};
use fewshot_core::metrics::MetricKind;
use fewshot_core::models::ModelKind;
use fewshot_core::training::{TrainConfig, DEFAULT_TEST_EPISODES};

pub const OUTPUT_ROOT_ENV: &str = "FEWSHOT_OUTPUT_ROOT";
pub const EFFECTIVE_CONFIG: &str = "config.effective.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub sizes: [usize; 3],
    pub seed: u64,
    /// Smallest acceptable split when the vocabulary forces scaling.
    pub min_per_split: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            sizes: PAPER_SPLIT_SIZES,
            seed: 0,
            min_per_split: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: DEFAULT_TEST_EPISODES,
            seed: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Defaults to `max(k + 2, 3)` for the configured k.
    #[serde(default)]
    pub min_occurrences: Option<usize>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Values given on the command line win over the run file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Run file (TOML)
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// matching, prototypical, relation or siamese
    #[arg(long)]
    pub model: Option<String>,
    /// cosine, euclidean, minkowski:p=<real> or poincare
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub n_way: Option<usize>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fce: Option<bool>,
    #[arg(long)]
    pub fce_steps: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads the run file (if any) and applies the overrides. Every
    /// validation problem is reported in one error.
    pub fn load(o: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match &o.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read run file {}", path.display()))?;
                let mut value: toml::Table = toml::from_str(&text)
                    .with_context(|| format!("invalid run file {}", path.display()))?;
                if let Some(c) = &o.corpus {
                    value.insert("corpus".into(), c.to_string_lossy().into_owned().into());
                }
                Self::from_toml(&toml::to_string(&value)?)
                    .with_context(|| format!("invalid run file {}", path.display()))?
            }
            None => match &o.corpus {
                Some(c) => Self::with_corpus(c.clone()),
                None => bail!("no corpus given: pass --corpus or a run file with `corpus = \"...\"`"),
            },
        };
        let mut problems = Vec::new();
        if let Some(d) = &o.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(m) = &o.model {
            match m.parse::<ModelKind>() {
                Ok(kind) => cfg.train.model.kind = kind,
                Err(e) => problems.push(e.to_string()),
            }
        }
        if let Some(m) = &o.metric {
            match m.parse::<MetricKind>() {
                Ok(metric) => cfg.train.model.metric = metric,
                Err(e) => problems.push(e.to_string()),
            }
        }
        let spec = &mut cfg.train.spec;
        spec.n_way = o.n_way.unwrap_or(spec.n_way);
        spec.k_shot = o.k_shot.unwrap_or(spec.k_shot);
        spec.batch_size = o.batch_size.unwrap_or(spec.batch_size);
        cfg.train.steps = o.steps.unwrap_or(cfg.train.steps);
        cfg.train.seed = o.seed.unwrap_or(cfg.train.seed);
        cfg.train.model.fce.enabled = o.fce.unwrap_or(cfg.train.model.fce.enabled);
        cfg.train.model.fce.steps = o.fce_steps.unwrap_or(cfg.train.model.fce.steps);
        problems.extend(cfg.problems());
        if !problems.is_empty() {
            bail!("invalid configuration:\n  - {}", problems.join("\n  - "));
        }
        Ok(cfg)
    }

    pub fn with_corpus(corpus: PathBuf) -> Self {
        Self {
            corpus,
            output_dir: default_output_dir(),
            min_occurrences: None,
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = self.train.problems();
        if self.eval.episodes == 0 {
            out.push("eval.episodes must be at least 1".into());
        }
        if self.min_occurrences == Some(0) {
            out.push("min_occurrences must be at least 1".into());
        }
        out
    }

    pub fn min_occurrences(&self) -> usize {
        self.min_occurrences
            .unwrap_or_else(|| default_min_occurrences(self.train.spec.k_shot))
    }

    /// Output directory, placed under `$FEWSHOT_OUTPUT_ROOT` when that is
    /// set and the configured directory is relative.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Writes the merged configuration next to the run's outputs.
    pub fn echo(&self) -> anyhow::Result<PathBuf> {
        let dir = self.output_dir();
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}
