use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;

use fewshot_core::autodiff::Graph;
use fewshot_core::episodes::{
    default_min_occurrences, export_episodes, import_episodes, Episode, EpisodeSampler, SplitRole,
};
use fewshot_core::metrics::MetricKind;
use fewshot_core::models::{Model, ModelKind};
use fewshot_core::training::{
    evaluate, evaluate_episodes, load_params, sample_suite, Checkpoint, EvalReport, Trainer,
};

use crate::artifacts::{prepare, write_json, Artifacts};
use crate::config::{resolve_output, Overrides, RunConfig};
use crate::report::Table;
use crate::Failure;

pub const LAST_CHECKPOINT: &str = "checkpoint.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TEST_REPORT: &str = "report.json";
pub const COMPARE_DIR: &str = "compare";

type Outcome<T = ()> = Result<T, Failure>;

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn load_config(o: &Overrides) -> Outcome<RunConfig> {
    RunConfig::load(o).map_err(Failure::Usage)
}

/// Run directory for commands that do not need a corpus.
fn output_dir_of(o: &Overrides) -> Outcome<PathBuf> {
    if o.config.is_some() || o.corpus.is_some() {
        return Ok(load_config(o)?.output_dir());
    }
    let dir = o.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs/default"));
    Ok(resolve_output(&dir))
}

fn require_file(path: &Path, what: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{what} not found: {}", path.display())))
    }
}

fn load_checkpoint(path: &Path) -> Outcome<Checkpoint> {
    require_file(path, "checkpoint")?;
    Checkpoint::load(path).map_err(Failure::from_core)
}

fn load_episodes(path: &Path) -> Outcome<Vec<Episode>> {
    require_file(path, "episode file")?;
    let eps = import_episodes(path).map_err(Failure::from_core)?;
    if eps.is_empty() {
        return Err(Failure::usage(format!("episode file {} holds no episodes", path.display())));
    }
    Ok(eps)
}

/// Model described by the checkpoint itself.
fn checkpoint_model(path: &Path) -> Outcome<Model> {
    load_checkpoint(path)?.model().map_err(Failure::from_core)
}

/// Model described by the run configuration, with the checkpoint's
/// weights. Any disagreement in names or shapes is an error.
fn configured_model(cfg: &RunConfig, art: &Artifacts, path: &Path) -> Outcome<Model> {
    let ckpt = load_checkpoint(path)?;
    let vocab = art.corpus.vocab.len();
    if ckpt.meta.vocab_size != vocab {
        return Err(Failure::usage(format!(
            "checkpoint {} has a vocabulary of {} words but the corpus has {vocab}",
            path.display(),
            ckpt.meta.vocab_size
        )));
    }
    let mut model = Model::init(cfg.train.model.clone(), vocab, 0).map_err(Failure::from_core)?;
    load_params(&mut model, &ckpt.params).map_err(|e| {
        Failure::usage(format!(
            "checkpoint {} does not fit the configured model: {e}",
            path.display()
        ))
    })?;
    Ok(model)
}

fn io_error(path: &Path, e: std::io::Error) -> fewshot_core::Error {
    fewshot_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn ingest(o: &Overrides) -> Outcome {
    let cfg = load_config(o)?;
    let dir = cfg.output_dir();
    let art = prepare(&cfg, &dir, false)?;
    cfg.echo().map_err(runtime)?;
    print!("{}", art.stats.render());
    println!("artifacts in {}", dir.display());
    Ok(())
}

pub fn split(o: &Overrides) -> Outcome {
    let cfg = load_config(o)?;
    let dir = cfg.output_dir();
    let art = prepare(&cfg, &dir, true)?;
    cfg.echo().map_err(runtime)?;
    let [train, val, test] = art.split.as_ref().expect("split prepared").sizes();
    println!(
        "{} eligible label words: {train} train, {val} validation, {test} test (seed {})",
        art.stats.eligible_words, cfg.split.seed
    );
    Ok(())
}

/// Trains into `dir` and returns the test report of the best checkpoint.
fn train_into(cfg: &RunConfig, art: &Artifacts, dir: &Path, resume: bool) -> Outcome<EvalReport> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(runtime)?;
    let last = dir.join(LAST_CHECKPOINT);
    let best = dir.join(BEST_CHECKPOINT);
    let log_path = dir.join(TRAIN_LOG);
    let vocab = art.corpus.vocab.len();
    let mut trainer = if resume {
        let ckpt = load_checkpoint(&last)?;
        let mut saved = ckpt.meta.config.clone();
        saved.steps = cfg.train.steps;
        if saved != cfg.train || ckpt.meta.vocab_size != vocab {
            return Err(Failure::usage(format!(
                "{} was written by a run with a different configuration or corpus",
                last.display()
            )));
        }
        Trainer::from_checkpoint(&ckpt, Some(cfg.train.steps)).map_err(Failure::from_core)?
    } else {
        for stale in [&last, &best] {
            if stale.exists() {
                std::fs::remove_file(stale).map_err(runtime)?;
            }
        }
        Trainer::new(cfg.train.clone(), vocab).map_err(Failure::from_core)?
    };
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&log_path)
        .with_context(|| format!("cannot open {}", log_path.display()))
        .map_err(runtime)?;
    let total = cfg.train.steps;
    trainer
        .run(art.data(), |r, t| {
            let line = serde_json::to_string(r)?;
            writeln!(log, "{line}").map_err(|e| io_error(&log_path, e))?;
            eprintln!(
                "step {:>6}/{total}  loss {:.4}  val {:.1} ± {:.1}%{}",
                r.step,
                r.loss,
                100.0 * r.val_accuracy,
                100.0 * r.val_stderr,
                if r.best { "  *" } else { "" }
            );
            t.checkpoint().save(&last)?;
            if r.best {
                if let Some(b) = t.best_checkpoint() {
                    b.save(&best)?;
                }
            }
            Ok(())
        })
        .map_err(Failure::from_core)?;
    trainer.checkpoint().save(&last).map_err(Failure::from_core)?;

    let model = if best.is_file() {
        checkpoint_model(&best)?
    } else {
        trainer.model
    };
    let test = EpisodeSampler::new(&art.corpus, &art.tasks, art.words(SplitRole::Test), cfg.train.spec)
        .map_err(Failure::from_core)?;
    let mut report = evaluate(&model, &test, cfg.eval.episodes, cfg.eval.seed).map_err(Failure::from_core)?;
    report.split = Some(SplitRole::Test);
    write_json(&dir.join(TEST_REPORT), &report).map_err(runtime)?;
    Ok(report)
}

pub fn train(o: &Overrides, resume: bool) -> Outcome {
    let cfg = load_config(o)?;
    let dir = cfg.output_dir();
    let art = prepare(&cfg, &dir, true)?;
    cfg.echo().map_err(runtime)?;
    let report = train_into(&cfg, &art, &dir, resume)?;
    println!("test accuracy {} over {} episodes", report.cell(), report.episodes);
    println!("outputs in {}", dir.display());
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub split: String,
    pub episodes: Option<usize>,
    pub episode_seed: Option<u64>,
    pub episodes_file: Option<PathBuf>,
    pub dump_episodes: Option<PathBuf>,
}

pub fn eval(o: &Overrides, args: EvalArgs) -> Outcome {
    let cfg = load_config(o)?;
    let role: SplitRole = args.split.parse().map_err(Failure::from_core)?;
    if args.episodes == Some(0) {
        return Err(Failure::usage("--episodes must be at least 1"));
    }
    let dir = cfg.output_dir();
    let art = prepare(&cfg, &dir, true)?;
    let ckpt = args.checkpoint.unwrap_or_else(|| dir.join(BEST_CHECKPOINT));
    let model = configured_model(&cfg, &art, &ckpt)?;
    let (episodes, split) = match &args.episodes_file {
        Some(f) => (load_episodes(f)?, None),
        None => {
            let sampler = EpisodeSampler::new(&art.corpus, &art.tasks, art.words(role), cfg.train.spec)
                .map_err(Failure::from_core)?;
            let n = args.episodes.unwrap_or(cfg.eval.episodes);
            let seed = args.episode_seed.unwrap_or(cfg.eval.seed);
            (sample_suite(&sampler, n, seed).map_err(Failure::from_core)?, Some(role))
        }
    };
    if let Some(d) = &args.dump_episodes {
        let path = dir.join(d);
        export_episodes(&episodes, &path).map_err(Failure::from_core)?;
        eprintln!("episodes written to {}", path.display());
    }
    let mut report = evaluate_episodes(&model, &episodes).map_err(Failure::from_core)?;
    report.split = split;
    let name = match split {
        Some(r) => format!("eval_{r}.json"),
        None => "eval_file.json".to_string(),
    };
    write_json(&dir.join(&name), &report).map_err(runtime)?;
    println!("{}", report.cell());
    eprintln!(
        "{} {} {}-way {}-shot, {} episodes; report in {}",
        report.model,
        report.metric,
        report.n_way,
        report.k_shot,
        report.episodes,
        dir.join(name).display()
    );
    Ok(())
}

/// Directory name of one table cell.
fn cell_dir(metric: &MetricKind, k: usize) -> String {
    let slug: String = metric
        .to_string()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '-' })
        .collect();
    format!("{slug}-k{k}")
}

pub fn compare_metrics(o: &Overrides, metrics: &[String], shots: &[usize], train_missing: bool) -> Outcome {
    let mut cfg = load_config(o)?;
    let mut parsed = Vec::new();
    let mut problems = Vec::new();
    for m in metrics {
        match m.parse::<MetricKind>() {
            Ok(metric) => parsed.push(metric),
            Err(e) => problems.push(e.to_string()),
        }
    }
    if shots.is_empty() || shots.contains(&0) {
        problems.push("--shots needs values of at least 1".into());
    }
    if !problems.is_empty() {
        return Err(Failure::usage(problems.join("; ")));
    }
    // every cell draws from the same eligible words
    let max_k = shots.iter().copied().max().unwrap_or(1);
    cfg.min_occurrences.get_or_insert(default_min_occurrences(max_k));
    let dir = cfg.output_dir();
    let art = prepare(&cfg, &dir, true)?;
    cfg.echo().map_err(runtime)?;
    let root = dir.join(COMPARE_DIR);
    let mut rows = Vec::new();
    for metric in &parsed {
        let mut cells = Vec::new();
        for &k in shots {
            let mut cell = cfg.clone();
            cell.train.model.metric = *metric;
            cell.train.spec.k_shot = k;
            let cdir = root.join(cell_dir(metric, k));
            let ckpt = cdir.join(BEST_CHECKPOINT);
            let report = if ckpt.is_file() {
                let model = configured_model(&cell, &art, &ckpt)?;
                let test = EpisodeSampler::new(&art.corpus, &art.tasks, art.words(SplitRole::Test), cell.train.spec)
                    .map_err(Failure::from_core)?;
                let mut r = evaluate(&model, &test, cell.eval.episodes, cell.eval.seed).map_err(Failure::from_core)?;
                r.split = Some(SplitRole::Test);
                Some(r)
            } else if train_missing {
                eprintln!("training {metric} {k}-shot into {}", cdir.display());
                Some(train_into(&cell, &art, &cdir, false)?)
            } else {
                eprintln!("no checkpoint at {}; cell marked absent", ckpt.display());
                None
            };
            cells.push(report);
        }
        rows.push((*metric, cells));
    }
    let table = Table {
        shots: shots.to_vec(),
        rows,
    };
    std::fs::create_dir_all(&root).map_err(runtime)?;
    let md = table.markdown();
    for (name, text) in [("table.md", &md), ("table.csv", &table.csv())] {
        let path = root.join(name);
        std::fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(runtime)?;
    }
    print!("{md}");
    Ok(())
}

fn label_of(ep: &Episode, class: usize) -> String {
    ep.label_words
        .get(class)
        .cloned()
        .unwrap_or_else(|| format!("class{class}"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn attention_csv(model: &Model, ep: &Episode) -> Outcome<String> {
    if model.kind() != ModelKind::Matching {
        return Err(Failure::usage(format!(
            "export-attention needs a matching-model checkpoint, got {}",
            model.kind()
        )));
    }
    let mut g = Graph::with_params(&model.params);
    let fwd = model.forward(&mut g, ep).map_err(Failure::from_core)?;
    let att = g.value(fwd.attention.expect("matching attention")).clone();
    let mut out = String::from("query");
    for s in &ep.support {
        write!(out, ",{}", csv_field(&label_of(ep, s.class))).unwrap();
    }
    out.push('\n');
    for (b, q) in ep.query.iter().enumerate() {
        out.push_str(&csv_field(&label_of(ep, q.class)));
        for w in att.row(b) {
            write!(out, ",{w}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn embeddings_csv(model: &Model, episodes: &[Episode]) -> Outcome<String> {
    let mut out = String::from("label,role");
    for j in 0..fewshot_core::embeddings::EMBED_DIM {
        write!(out, ",e{j}").unwrap();
    }
    out.push('\n');
    for ep in episodes {
        let mut g = Graph::with_params(&model.params);
        let emb = model.embed(&mut g, ep).map_err(Failure::from_core)?;
        for (role, var, examples) in [("support", emb.support, &ep.support), ("query", emb.query, &ep.query)] {
            let t = g.value(var);
            for (i, e) in examples.iter().enumerate() {
                out.push_str(&csv_field(&label_of(ep, e.class)));
                write!(out, ",{role}").unwrap();
                for v in t.row(i) {
                    write!(out, ",{v}").unwrap();
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn write_output(dir: &Path, out: &Path, text: &str) -> Outcome {
    std::fs::create_dir_all(dir).map_err(runtime)?;
    let path = dir.join(out);
    std::fs::write(&path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)?;
    println!("{}", path.display());
    Ok(())
}

pub fn export_attention(o: &Overrides, checkpoint: Option<PathBuf>, episodes: &Path, index: usize, out: &Path) -> Outcome {
    let dir = output_dir_of(o)?;
    let model = checkpoint_model(&checkpoint.unwrap_or_else(|| dir.join(BEST_CHECKPOINT)))?;
    let eps = load_episodes(episodes)?;
    let ep = eps.get(index).ok_or_else(|| {
        Failure::usage(format!("episode {index} requested but {} holds {}", episodes.display(), eps.len()))
    })?;
    write_output(&dir, out, &attention_csv(&model, ep)?)
}

pub fn export_embeddings(o: &Overrides, checkpoint: Option<PathBuf>, episodes: &Path, out: &Path) -> Outcome {
    let dir = output_dir_of(o)?;
    let model = checkpoint_model(&checkpoint.unwrap_or_else(|| dir.join(BEST_CHECKPOINT)))?;
    let eps = load_episodes(episodes)?;
    write_output(&dir, out, &embeddings_csv(&model, &eps)?)
}
