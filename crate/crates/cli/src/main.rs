//! `fewshot`: ingest a corpus, split its label words, train and evaluate
//! few-shot missing-word learners, and export tables and figure data.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error.

mod artifacts;
mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Overrides;

#[derive(Parser)]
#[command(name = "fewshot", version, about = "Few-shot missing-word learners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read a corpus, build the task index and print its statistics
    Ingest {
        #[command(flatten)]
        run: Overrides,
    },
    /// Partition eligible label words into train, validation and test
    Split {
        #[command(flatten)]
        run: Overrides,
    },
    /// Train a model, keep the best checkpoint and report test accuracy
    Train {
        #[command(flatten)]
        run: Overrides,
        /// Continue from the run directory's last checkpoint
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a split or an episode file
    Eval {
        #[command(flatten)]
        run: Overrides,
        /// Defaults to best.ckpt in the run directory
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Defaults to the run file's eval.episodes
        #[arg(long)]
        episodes: Option<usize>,
        /// Base seed of the episode suite; defaults to eval.seed
        #[arg(long)]
        episode_seed: Option<u64>,
        /// Evaluate these episodes instead of sampling
        #[arg(long)]
        episodes_file: Option<PathBuf>,
        /// Also write the evaluated episodes to this file
        #[arg(long)]
        dump_episodes: Option<PathBuf>,
    },
    /// Accuracy table over metrics and shots
    CompareMetrics {
        #[command(flatten)]
        run: Overrides,
        #[arg(long, value_delimiter = ',', default_value = "cosine,euclidean,poincare,minkowski:p=1,minkowski:p=3")]
        metrics: Vec<String>,
        #[arg(long = "shots", value_delimiter = ',', default_value = "1,2,3")]
        shots: Vec<usize>,
        /// Train cells whose checkpoint is missing
        #[arg(long)]
        train: bool,
    },
    /// Matching attention of one episode as CSV
    ExportAttention {
        #[command(flatten)]
        run: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes_file: PathBuf,
        /// Which episode of the file
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "attention.csv")]
        out: PathBuf,
    },
    /// Sentence embeddings of every episode in a file as CSV
    ExportEmbeddings {
        #[command(flatten)]
        run: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes_file: PathBuf,
        #[arg(long, default_value = "embeddings.csv")]
        out: PathBuf,
    },
}

/// Error carrying its exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn usage(msg: impl std::fmt::Display) -> Self {
        Failure::Usage(anyhow::anyhow!("{msg}"))
    }

    /// Configuration problems are usage errors, everything else is a
    /// runtime failure.
    pub fn from_core(e: fewshot_core::Error) -> Self {
        match e {
            fewshot_core::Error::Config(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest { run } => commands::ingest(&run),
        Command::Split { run } => commands::split(&run),
        Command::Train { run, resume } => commands::train(&run, resume),
        Command::Eval {
            run,
            checkpoint,
            split,
            episodes,
            episode_seed,
            episodes_file,
            dump_episodes,
        } => commands::eval(
            &run,
            commands::EvalArgs {
                checkpoint,
                split,
                episodes,
                episode_seed,
                episodes_file,
                dump_episodes,
            },
        ),
        Command::CompareMetrics {
            run,
            metrics,
            shots,
            train,
        } => commands::compare_metrics(&run, &metrics, &shots, train),
        Command::ExportAttention {
            run,
            checkpoint,
            episodes_file,
            index,
            out,
        } => commands::export_attention(&run, checkpoint, &episodes_file, index, &out),
        Command::ExportEmbeddings {
            run,
            checkpoint,
            episodes_file,
            out,
        } => commands::export_embeddings(&run, checkpoint, &episodes_file, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
