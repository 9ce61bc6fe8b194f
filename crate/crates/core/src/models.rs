//! Metric-based few-shot heads.
//!
//! Every head maps an embedded episode to a `[B, N]` matrix over the
//! episode's classes. Matching, Prototypical and Siamese produce
//! distributions; Relation produces independent scores in `(0, 1)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::embeddings::{EpisodeEmbedding, EpisodeEncoder, FceConfig, DEFAULT_WORD_DIM, EMBED_DIM};
use crate::episodes::{Episode, PairBatch};
use crate::error::{Error, Result};
use crate::metrics::{pairwise_scores, MetricKind};
use crate::tensor::Tensor;

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Matching,
    Prototypical,
    Relation,
    Siamese,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Matching,
        ModelKind::Prototypical,
        ModelKind::Relation,
        ModelKind::Siamese,
    ];
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Matching => "matching",
            ModelKind::Prototypical => "prototypical",
            ModelKind::Relation => "relation",
            ModelKind::Siamese => "siamese",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model '{s}'; expected matching, prototypical, relation or siamese"
                ))
            })
    }
}

/// Head selection plus everything needed to rebuild its parameters.
/// `metric` is read by Matching and Prototypical, `fce` by Matching only,
/// `relation_hidden` by Relation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub metric: MetricKind,
    pub fce: FceConfig,
    pub relation_hidden: Vec<usize>,
    pub word_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Matching,
            metric: MetricKind::Cosine,
            fce: FceConfig::default(),
            relation_hidden: vec![64, 64],
            word_dim: DEFAULT_WORD_DIM,
        }
    }
}

impl ModelConfig {
    pub fn matching(metric: MetricKind, fce: FceConfig) -> Self {
        Self {
            metric,
            fce,
            ..Self::default()
        }
    }

    pub fn of_kind(kind: ModelKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.metric.validate()?;
        self.fce.validate()?;
        if self.word_dim == 0 {
            return Err(Error::Config("word_dim must be positive".into()));
        }
        if self.kind == ModelKind::Relation
            && (self.relation_hidden.is_empty() || self.relation_hidden.contains(&0))
        {
            return Err(Error::Config(
                "relation head needs at least one hidden layer of positive width".into(),
            ));
        }
        Ok(())
    }

    fn uses_fce(&self) -> bool {
        self.kind == ModelKind::Matching && self.fce.enabled
    }
}

#[derive(Debug, Clone)]
enum Head {
    Metric,
    Relation { layers: Vec<(ParamId, ParamId)> },
    Siamese { w: ParamId, b: ParamId },
}

/// A head, its encoder and the parameters of both.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamStore,
    encoder: EpisodeEncoder,
    head: Head,
}

/// Head output for one episode. `output` holds probabilities except for
/// the Relation head, where it holds raw relation scores.
pub struct Forward {
    pub output: Var,
    /// Matching attention over supports, `[B, N·k]`.
    pub attention: Option<Var>,
    pub embedding: EpisodeEmbedding,
}

impl Model {
    pub fn init(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size < 3 {
            return Err(Error::Config(format!(
                "vocabulary of {vocab_size} tokens cannot hold the special tokens"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let fce = if config.uses_fce() {
            config.fce
        } else {
            FceConfig::disabled()
        };
        let encoder =
            EpisodeEncoder::init(&mut params, vocab_size, config.word_dim, &fce, &mut rng)?;
        let head = match config.kind {
            ModelKind::Matching | ModelKind::Prototypical => Head::Metric,
            ModelKind::Relation => {
                let mut widths = vec![2 * EMBED_DIM];
                widths.extend(&config.relation_hidden);
                widths.push(1);
                let layers = widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| dense(&mut params, &format!("relation.l{i}"), w[0], w[1], &mut rng))
                    .collect::<Result<_>>()?;
                Head::Relation { layers }
            }
            ModelKind::Siamese => {
                let (w, b) = dense(&mut params, "siamese", EMBED_DIM, 1, &mut rng)?;
                Head::Siamese { w, b }
            }
        };
        Ok(Self {
            config,
            vocab_size,
            params,
            encoder,
            head,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn encoder(&self) -> &EpisodeEncoder {
        &self.encoder
    }

    /// Support and query embeddings as the head sees them.
    pub fn embed(&self, g: &mut Graph<'_>, ep: &Episode) -> Result<EpisodeEmbedding> {
        let support: Vec<Vec<u32>> = ep.support.iter().map(|e| e.tokens.clone()).collect();
        let query: Vec<Vec<u32>> = ep.query.iter().map(|e| e.tokens.clone()).collect();
        self.encoder.embed_episode(g, &support, &query)
    }

    pub fn forward(&self, g: &mut Graph<'_>, ep: &Episode) -> Result<Forward> {
        let emb = self.embed(g, ep)?;
        let classes = ep.support_classes();
        let n = ep.n_way;
        let (output, attention) = match &self.head {
            Head::Metric if self.config.kind == ModelKind::Matching => {
                let (p, a) = matching_probs(g, &self.config.metric, emb.query, emb.support, &classes, n)?;
                (p, Some(a))
            }
            Head::Metric => (
                prototypical_probs(g, &self.config.metric, emb.query, emb.support, &classes, n)?,
                None,
            ),
            Head::Relation { layers } => (
                relation_scores(g, layers, emb.query, emb.support, &classes, n)?,
                None,
            ),
            Head::Siamese { w, b } => (
                siamese_oneshot(g, *w, *b, emb.query, emb.support, &classes, n)?,
                None,
            ),
        };
        Ok(Forward {
            output,
            attention,
            embedding: emb,
        })
    }

    /// Episode training loss: NLL for Matching and Prototypical, MSE for
    /// Relation. Siamese trains on pairs, see [`Model::pair_loss`].
    pub fn episode_loss(&self, g: &mut Graph<'_>, ep: &Episode) -> Result<Var> {
        let fwd = self.forward(g, ep)?;
        let targets = ep.query_targets();
        match self.config.kind {
            ModelKind::Matching | ModelKind::Prototypical => nll_loss(g, fwd.output, &targets),
            ModelKind::Relation => mse_relation_loss(g, fwd.output, &targets),
            ModelKind::Siamese => Err(Error::invalid(
                "episode_loss",
                "the siamese head trains on sentence pairs",
            )),
        }
    }

    /// Mean binary cross-entropy of same/different predictions.
    pub fn pair_loss(&self, g: &mut Graph<'_>, batch: &PairBatch) -> Result<Var> {
        let p = self.pair_probs(g, &batch.left, &batch.right)?;
        bce_loss(g, p, &batch.labels)
    }

    /// Same-class probability of each `(left[i], right[i])` pair.
    pub fn pair_probs(&self, g: &mut Graph<'_>, left: &[Vec<u32>], right: &[Vec<u32>]) -> Result<Var> {
        let Head::Siamese { w, b } = &self.head else {
            return Err(Error::invalid("pair_probs", "model is not siamese"));
        };
        if left.len() != right.len() {
            return Err(Error::invalid("pair_probs", "unequal pair sides"));
        }
        let all: Vec<Vec<u32>> = left.iter().chain(right).cloned().collect();
        let emb = self.encoder.pre.embed(g, &all)?;
        let a = g.slice(emb, 0, 0, left.len())?;
        let bb = g.slice(emb, 0, left.len(), right.len())?;
        siamese_probs(g, *w, *b, a, bb)
    }

    /// Rows of the output as a distribution over the episode's classes.
    /// Relation scores are normalised by their row sum.
    pub fn predict(&self, ep: &Episode) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.params);
        let fwd = self.forward(&mut g, ep)?;
        let out = g.value(fwd.output).clone();
        Ok(match self.config.kind {
            ModelKind::Relation => normalize_rows(out),
            _ => out,
        })
    }

    /// Fraction of queries whose argmax matches the target.
    pub fn episode_accuracy(&self, ep: &Episode) -> Result<f64> {
        let p = self.predict(ep)?;
        Ok(accuracy(&p, &ep.query_targets()))
    }
}

fn dense<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let w = store.add_uniform(
        format!("{prefix}.w"),
        &[fan_in, fan_out],
        1.0 / (fan_in as f64).sqrt(),
        rng,
    )?;
    let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
    Ok((w, b))
}

fn check_classes(classes: &[usize], n: usize, rows: usize) -> Result<()> {
    if classes.len() != rows {
        return Err(Error::invalid(
            "head",
            format!("{} support classes for {rows} support rows", classes.len()),
        ));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= n) {
        return Err(Error::invalid("head", format!("support class {c} outside {n}-way")));
    }
    Ok(())
}

/// `[len, n]` one-hot rows of `classes`.
pub fn one_hot(classes: &[usize], n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes.len().max(1), n]);
    for (i, &c) in classes.iter().enumerate() {
        t.data_mut()[i * n + c] = 1.0;
    }
    t
}

/// Attention-weighted label average: `softmax(scores) · onehot(classes)`.
/// Returns the class probabilities and the attention.
pub fn attention_probs(g: &mut Graph<'_>, scores: Var, classes: &[usize], n: usize) -> Result<(Var, Var)> {
    check_classes(classes, n, g.value(scores).cols())?;
    let a = g.softmax_rows(scores)?;
    let y = g.constant(one_hot(classes, n));
    Ok((g.matmul(a, y)?, a))
}

pub fn matching_probs(
    g: &mut Graph<'_>,
    metric: &MetricKind,
    query: Var,
    support: Var,
    classes: &[usize],
    n: usize,
) -> Result<(Var, Var)> {
    let scores = pairwise_scores(g, metric, query, support)?;
    attention_probs(g, scores, classes, n)
}

/// Class means of the support rows as a `[n, d]` matrix.
pub fn prototypes(g: &mut Graph<'_>, support: Var, classes: &[usize], n: usize) -> Result<Var> {
    check_classes(classes, n, g.value(support).rows())?;
    let counts = classes.iter().fold(vec![0usize; n], |mut c, &k| {
        c[k] += 1;
        c
    });
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid("prototypes", format!("class {empty} has no support")));
    }
    let mut avg = Tensor::zeros(&[n, classes.len()]);
    for (i, &c) in classes.iter().enumerate() {
        avg.data_mut()[c * classes.len() + i] = 1.0 / counts[c] as f64;
    }
    let avg = g.constant(avg);
    g.matmul(avg, support)
}

pub fn prototypical_probs(
    g: &mut Graph<'_>,
    metric: &MetricKind,
    query: Var,
    support: Var,
    classes: &[usize],
    n: usize,
) -> Result<Var> {
    let protos = prototypes(g, support, classes, n)?;
    let scores = pairwise_scores(g, metric, query, protos)?;
    g.softmax_rows(scores)
}

/// Relation scores `[B, n]`: each query is concatenated with the summed
/// supports of every class and scored by the MLP in `layers`.
fn relation_scores(
    g: &mut Graph<'_>,
    layers: &[(ParamId, ParamId)],
    query: Var,
    support: Var,
    classes: &[usize],
    n: usize,
) -> Result<Var> {
    check_classes(classes, n, g.value(support).rows())?;
    let mut sum = Tensor::zeros(&[n, classes.len()]);
    for (i, &c) in classes.iter().enumerate() {
        sum.data_mut()[c * classes.len() + i] = 1.0;
    }
    let sum = g.constant(sum);
    let features = g.matmul(sum, support)?;
    let b = g.value(query).rows();
    let qi: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let ci: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
    let qs = g.gather_rows(query, &qi)?;
    let cs = g.gather_rows(features, &ci)?;
    let mut x = g.concat(&[qs, cs], 1)?;
    for (i, &(w, bias)) in layers.iter().enumerate() {
        let w = g.param(w);
        let bias = g.param(bias);
        let z = g.matmul(x, w)?;
        let z = g.add_row(z, bias)?;
        x = if i + 1 == layers.len() {
            g.sigmoid(z)?
        } else {
            g.tanh(z)?
        };
    }
    g.reshape(x, &[b, n])
}

/// `sigmoid(|a − b| · w + bias)` row by row, as a vector.
fn siamese_probs(g: &mut Graph<'_>, w: ParamId, b: ParamId, a: Var, bb: Var) -> Result<Var> {
    let m = g.value(a).rows();
    let diff = g.sub(a, bb)?;
    let l1 = g.abs(diff)?;
    let w = g.param(w);
    let b = g.param(b);
    let z = g.matmul(l1, w)?;
    let z = g.add_row(z, b)?;
    let p = g.sigmoid(z)?;
    g.reshape(p, &[m])
}

/// Per query: pair probability against every support, max within each
/// class, then normalised by the row sum.
fn siamese_oneshot(
    g: &mut Graph<'_>,
    w: ParamId,
    b: ParamId,
    query: Var,
    support: Var,
    classes: &[usize],
    n: usize,
) -> Result<Var> {
    let s = g.value(support).rows();
    check_classes(classes, n, s)?;
    let bq = g.value(query).rows();
    let qi: Vec<usize> = (0..bq).flat_map(|i| std::iter::repeat_n(i, s)).collect();
    let si: Vec<usize> = (0..bq).flat_map(|_| 0..s).collect();
    let qa = g.gather_rows(query, &qi)?;
    let sb = g.gather_rows(support, &si)?;
    let p = siamese_probs(g, w, b, qa, sb)?;
    let p = g.reshape(p, &[bq, s])?;
    let pt = g.transpose(p)?;
    let mut per_class = Vec::with_capacity(n);
    for c in 0..n {
        let rows: Vec<usize> = (0..s).filter(|&i| classes[i] == c).collect();
        if rows.is_empty() {
            return Err(Error::invalid("siamese", format!("class {c} has no support")));
        }
        let sel = g.gather_rows(pt, &rows)?;
        let m = g.max_over(sel, 0)?;
        per_class.push(g.reshape(m, &[1, bq])?);
    }
    let scores = g.concat(&per_class, 0)?;
    let scores = g.transpose(scores)?;
    let total = g.sum(scores, 1)?;
    let total = g.reshape(total, &[bq, 1])?;
    let total = g.broadcast_to(total, &[bq, n])?;
    g.div(scores, total)
}

fn check_targets(op: &'static str, targets: &[usize], shape: &[usize]) -> Result<()> {
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape(op, shape, &[targets.len()]));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= shape[1]) {
        return Err(Error::invalid(op, format!("target {t} outside {} classes", shape[1])));
    }
    Ok(())
}

/// `−(1/B) Σ ln max(probs[b, target_b], 1e-12)`.
pub fn nll_loss(g: &mut Graph<'_>, probs: Var, targets: &[usize]) -> Result<Var> {
    let shape = g.value(probs).shape().to_vec();
    check_targets("nll_loss", targets, &shape)?;
    let n = shape[1];
    let flat = g.reshape(probs, &[shape[0] * n, 1])?;
    let idx: Vec<usize> = targets.iter().enumerate().map(|(b, &t)| b * n + t).collect();
    let picked = g.gather_rows(flat, &idx)?;
    let floored = g.clamp_min(picked, PROB_FLOOR)?;
    let logs = g.log(floored)?;
    let mean = g.mean_all(logs)?;
    g.neg(mean)
}

/// Mean over all `B·N` entries of `(score − [class == target])²`.
pub fn mse_relation_loss(g: &mut Graph<'_>, scores: Var, targets: &[usize]) -> Result<Var> {
    let shape = g.value(scores).shape().to_vec();
    check_targets("mse_relation_loss", targets, &shape)?;
    let ind = g.constant(one_hot(targets, shape[1]));
    let d = g.sub(scores, ind)?;
    let sq = g.mul(d, d)?;
    g.mean_all(sq)
}

/// Mean binary cross-entropy with `p` clamped to `[1e-12, 1 − 1e-12]`.
pub fn bce_loss(g: &mut Graph<'_>, p: Var, labels: &[f64]) -> Result<Var> {
    let shape = g.value(p).shape().to_vec();
    if shape != [labels.len()] {
        return Err(Error::shape("bce_loss", &shape, &[labels.len()]));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid("bce_loss", "labels must be 0 or 1"));
    }
    let p = g.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let y = g.constant(Tensor::vector(labels.to_vec()));
    let not_y = g.constant(Tensor::vector(labels.iter().map(|y| 1.0 - y).collect()));
    let lp = g.log(p)?;
    let q = g.neg(p)?;
    let q = g.add_scalar(q, 1.0)?;
    let lq = g.log(q)?;
    let a = g.mul(y, lp)?;
    let b = g.mul(not_y, lq)?;
    let s = g.add(a, b)?;
    let mean = g.mean_all(s)?;
    g.neg(mean)
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(pred: &Tensor, targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = targets
        .iter()
        .enumerate()
        .filter(|&(b, &t)| argmax(pred.row(b)) == t)
        .count();
    hits as f64 / targets.len() as f64
}

fn normalize_rows(mut t: Tensor) -> Tensor {
    let n = t.cols();
    for row in t.data_mut().chunks_mut(n) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            row.fill(1.0 / n as f64);
        }
    }
    t
}
