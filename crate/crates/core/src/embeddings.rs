//! Two-level sentence encoding.
//!
//! The first level ([`PreEmbedder`]) max-pools word vectors over a
//! sentence and projects the result to [`EMBED_DIM`]. The optional second
//! level, Full Context Embedding, re-encodes supports with a bidirectional
//! LSTM ([`fce_g`]) and queries with an attention LSTM that reads the
//! encoded support set for a fixed number of steps ([`fce_f`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::episodes::{PAD, UNK};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 64;
pub const DEFAULT_WORD_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FceConfig {
    pub enabled: bool,
    /// attLSTM processing steps.
    pub steps: usize,
    pub hidden: usize,
}

impl Default for FceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            steps: 5,
            hidden: EMBED_DIM,
        }
    }
}

impl FceConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.steps < 1 {
            return Err(Error::Config("FCE needs at least one attLSTM step".into()));
        }
        // residual connections add hidden states to 64-d pre-embeddings
        if self.hidden != EMBED_DIM {
            return Err(Error::Config(format!(
                "FCE hidden size must equal the embedding size {EMBED_DIM}, got {}",
                self.hidden
            )));
        }
        Ok(())
    }
}

fn uniform_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Word table, max-pool over tokens, then a linear map to [`EMBED_DIM`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreEmbedder {
    pub table: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub vocab_size: usize,
    pub word_dim: usize,
}

impl PreEmbedder {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        word_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = uniform_bound(word_dim);
        let table = store.add_uniform(
            format!("{prefix}.word_table"),
            &[vocab_size, word_dim],
            bound,
            rng,
        )?;
        let proj_w = store.add_uniform(
            format!("{prefix}.proj.w"),
            &[word_dim, EMBED_DIM],
            bound,
            rng,
        )?;
        let proj_b = store.add(format!("{prefix}.proj.b"), Tensor::zeros(&[EMBED_DIM]))?;
        Ok(Self {
            table,
            proj_w,
            proj_b,
            vocab_size,
            word_dim,
        })
    }

    /// Pre-embeds every sentence, one output row each. PAD tokens are
    /// skipped; ids outside the table read the UNK row.
    pub fn embed(&self, g: &mut Graph<'_>, sentences: &[Vec<u32>]) -> Result<Var> {
        if sentences.is_empty() {
            return Err(Error::Empty { op: "pre_embed" });
        }
        let mut ids = Vec::new();
        let mut spans = Vec::with_capacity(sentences.len());
        for s in sentences {
            let start = ids.len();
            ids.extend(s.iter().filter(|&&t| t != PAD).map(|&t| {
                if (t as usize) < self.vocab_size {
                    t as usize
                } else {
                    UNK as usize
                }
            }));
            if ids.len() == start {
                return Err(Error::Empty { op: "pre_embed" });
            }
            spans.push((start, ids.len() - start));
        }
        let table = g.param(self.table);
        let words = g.gather_rows(table, &ids)?;
        let mut pooled = Vec::with_capacity(spans.len());
        for (start, len) in spans {
            let rows = g.slice(words, 0, start, len)?;
            let max = g.max_over(rows, 0)?;
            pooled.push(g.reshape(max, &[1, self.word_dim])?);
        }
        let pooled = g.concat(&pooled, 0)?;
        let w = g.param(self.proj_w);
        let b = g.param(self.proj_b);
        let proj = g.matmul(pooled, w)?;
        g.add_row(proj, b)
    }
}

/// Standard LSTM cell; gate columns are ordered input, forget, output,
/// candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub recurrent_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// `recurrent_dim` is the width of the recurrent input, which is
    /// larger than `hidden` when extra state is concatenated onto `h`.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        recurrent_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let wx = store.add_uniform(
            format!("{prefix}.wx"),
            &[input_dim, 4 * hidden],
            uniform_bound(input_dim),
            rng,
        )?;
        let wh = store.add_uniform(
            format!("{prefix}.wh"),
            &[recurrent_dim, 4 * hidden],
            uniform_bound(recurrent_dim),
            rng,
        )?;
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        let bias = store.add(format!("{prefix}.b"), Tensor::vector(b))?;
        Ok(Self {
            wx,
            wh,
            bias,
            input_dim,
            recurrent_dim,
            hidden,
        })
    }

    /// One step over a batch: `x[B, input]`, `h_prev[B, recurrent]`,
    /// `c_prev[B, hidden]` to `(h, c)`.
    pub fn step(&self, g: &mut Graph<'_>, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let (xs, hs, cs) = (
            g.value(x).shape().to_vec(),
            g.value(h_prev).shape().to_vec(),
            g.value(c_prev).shape().to_vec(),
        );
        if xs.len() != 2 || xs[1] != self.input_dim {
            return Err(Error::shape("lstm_step", &xs, &[xs[0], self.input_dim]));
        }
        if hs != [xs[0], self.recurrent_dim] {
            return Err(Error::shape("lstm_step", &hs, &[xs[0], self.recurrent_dim]));
        }
        if cs != [xs[0], self.hidden] {
            return Err(Error::shape("lstm_step", &cs, &[xs[0], self.hidden]));
        }
        let wx = g.param(self.wx);
        let wh = g.param(self.wh);
        let b = g.param(self.bias);
        let zx = g.matmul(x, wx)?;
        let zh = g.matmul(h_prev, wh)?;
        let z = g.add(zx, zh)?;
        let z = g.add_row(z, b)?;
        let h = self.hidden;
        let zi = g.slice(z, 1, 0, h)?;
        let zf = g.slice(z, 1, h, h)?;
        let zo = g.slice(z, 1, 2 * h, h)?;
        let zg = g.slice(z, 1, 3 * h, h)?;
        let i = g.sigmoid(zi)?;
        let f = g.sigmoid(zf)?;
        let o = g.sigmoid(zo)?;
        let cand = g.tanh(zg)?;
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h_new = g.mul(o, tc)?;
        Ok((h_new, c))
    }
}

/// Bidirectional encoding of the support set: row `i` is
/// `h_fwd[i] + h_bwd[i] + support[i]`. Rows are consumed in the given
/// order, so permuting the support set can change the result.
pub fn fce_g(g: &mut Graph<'_>, support: Var, fwd: &LstmCell, bwd: &LstmCell) -> Result<Var> {
    let shape = g.value(support).shape().to_vec();
    if shape.len() != 2 || shape[1] != fwd.input_dim || shape[1] != bwd.input_dim {
        return Err(Error::shape("fce_g", &shape, &[shape[0], fwd.input_dim]));
    }
    let n = shape[0];
    let rows: Vec<Var> = (0..n)
        .map(|i| g.slice(support, 0, i, 1))
        .collect::<Result<_>>()?;
    let run = |g: &mut Graph<'_>, cell: &LstmCell, order: &mut dyn Iterator<Item = usize>| {
        let mut h = g.constant(Tensor::zeros(&[1, cell.recurrent_dim]));
        let mut c = g.constant(Tensor::zeros(&[1, cell.hidden]));
        let mut out = vec![None; n];
        for i in order {
            (h, c) = cell.step(g, rows[i], h, c)?;
            out[i] = Some(h);
        }
        let out: Vec<Var> = out.into_iter().map(Option::unwrap).collect();
        g.concat(&out, 0)
    };
    let hf = run(g, fwd, &mut (0..n))?;
    let hb = run(g, bwd, &mut (0..n).rev())?;
    let sum = g.add(hf, hb)?;
    g.add(sum, support)
}

/// Query encoding by an LSTM that attends over `support_enc` for `steps`
/// steps. Each step reads `r = softmax(h_prev · gᵀ) · g`, feeds `[h_prev, r]`
/// as the recurrent input and adds the query back onto the new hidden
/// state. Returns the final state and the attention weights of every step.
pub fn fce_f(
    g: &mut Graph<'_>,
    query: Var,
    support_enc: Var,
    steps: usize,
    cell: &LstmCell,
) -> Result<(Var, Vec<Var>)> {
    if steps < 1 {
        return Err(Error::invalid("fce_f", "steps must be at least 1"));
    }
    let qs = g.value(query).shape().to_vec();
    let ss = g.value(support_enc).shape().to_vec();
    if qs.len() != 2 || ss.len() != 2 || qs[1] != ss[1] || qs[1] != cell.hidden {
        return Err(Error::shape("fce_f", &qs, &ss));
    }
    if cell.recurrent_dim != 2 * cell.hidden {
        return Err(Error::invalid(
            "fce_f",
            "cell recurrent input must be twice its hidden size",
        ));
    }
    let b = qs[0];
    let mut h = g.constant(Tensor::zeros(&[b, cell.hidden]));
    let mut c = g.constant(Tensor::zeros(&[b, cell.hidden]));
    let support_t = g.transpose(support_enc)?;
    let mut attention = Vec::with_capacity(steps);
    for _ in 0..steps {
        let logits = g.matmul(h, support_t)?;
        let a = g.softmax_rows(logits)?;
        let r = g.matmul(a, support_enc)?;
        let rec = g.concat(&[h, r], 1)?;
        let (h_hat, c_new) = cell.step(g, query, rec, c)?;
        h = g.add(h_hat, query)?;
        c = c_new;
        attention.push(a);
    }
    Ok((h, attention))
}

/// Pre-embedder plus optional FCE cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeEncoder {
    pub pre: PreEmbedder,
    pub fce: Option<FceCells>,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FceCells {
    pub g_fwd: LstmCell,
    pub g_bwd: LstmCell,
    pub f_cell: LstmCell,
}

pub struct EpisodeEmbedding {
    pub support: Var,
    pub query: Var,
    /// attLSTM attention per step (empty without FCE).
    pub fce_attention: Vec<Var>,
}

impl EpisodeEncoder {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        word_dim: usize,
        fce: &FceConfig,
        rng: &mut R,
    ) -> Result<Self> {
        fce.validate()?;
        let pre = PreEmbedder::init(store, "pre", vocab_size, word_dim, rng)?;
        let cells = if fce.enabled {
            let h = fce.hidden;
            Some(FceCells {
                g_fwd: LstmCell::init(store, "fce.g.fwd", EMBED_DIM, h, h, rng)?,
                g_bwd: LstmCell::init(store, "fce.g.bwd", EMBED_DIM, h, h, rng)?,
                f_cell: LstmCell::init(store, "fce.f", EMBED_DIM, 2 * h, h, rng)?,
            })
        } else {
            None
        };
        Ok(Self {
            pre,
            fce: cells,
            steps: fce.steps,
        })
    }

    /// Embeds supports and queries. Without FCE both sides are plain
    /// pre-embeddings; with FCE supports go through [`fce_g`] and queries
    /// through [`fce_f`] against the encoded supports.
    pub fn embed_episode(
        &self,
        g: &mut Graph<'_>,
        support: &[Vec<u32>],
        query: &[Vec<u32>],
    ) -> Result<EpisodeEmbedding> {
        if support.is_empty() || query.is_empty() {
            return Err(Error::Empty { op: "embed_episode" });
        }
        let all: Vec<Vec<u32>> = support.iter().chain(query).cloned().collect();
        let pre = self.pre.embed(g, &all)?;
        let s = g.slice(pre, 0, 0, support.len())?;
        let q = g.slice(pre, 0, support.len(), query.len())?;
        match &self.fce {
            None => Ok(EpisodeEmbedding {
                support: s,
                query: q,
                fce_attention: Vec::new(),
            }),
            Some(cells) => {
                let gs = fce_g(g, s, &cells.g_fwd, &cells.g_bwd)?;
                let (fq, att) = fce_f(g, q, gs, self.steps, &cells.f_cell)?;
                Ok(EpisodeEmbedding {
                    support: gs,
                    query: fq,
                    fce_attention: att,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.data_mut(id).fill(0.0);
        }
    }

    fn pre_only(vocab: usize, seed: u64) -> (ParamStore, PreEmbedder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pre = PreEmbedder::init(&mut store, "pre", vocab, 8, &mut rng).unwrap();
        (store, pre)
    }

    fn embed_rows(store: &ParamStore, pre: &PreEmbedder, s: &[Vec<u32>]) -> Tensor {
        let mut g = Graph::with_params(store);
        let v = pre.embed(&mut g, s).unwrap();
        g.value(v).clone()
    }

    #[test]
    fn single_token_is_projection_of_its_word() {
        let (store, pre) = pre_only(10, 1);
        let out = embed_rows(&store, &pre, &[vec![7]]);
        let word = store.tensor(pre.table).row(7);
        let w = store.tensor(pre.proj_w);
        let b = store.tensor(pre.proj_b);
        for j in 0..EMBED_DIM {
            let want: f64 = (0..8).map(|i| word[i] * w.at(i, j)).sum::<f64>() + b.data()[j];
            assert!((out.at(0, j) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_and_pad_invariance() {
        let (store, pre) = pre_only(12, 2);
        let a = embed_rows(&store, &pre, &[vec![3, 5, 9, 4]]);
        let b = embed_rows(&store, &pre, &[vec![9, PAD, 4, 3, 5, PAD]]);
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_ids_read_the_unk_row_and_empty_fails() {
        let (store, pre) = pre_only(6, 3);
        assert_eq!(
            embed_rows(&store, &pre, &[vec![99]]),
            embed_rows(&store, &pre, &[vec![UNK]])
        );
        let mut g = Graph::with_params(&store);
        assert!(pre.embed(&mut g, &[vec![PAD, PAD]]).is_err());
        assert!(pre.embed(&mut g, &[vec![]]).is_err());
    }

    #[test]
    fn sentences_sharing_columnwise_maxima_embed_identically() {
        let (store, pre) = pre_only(20, 4);
        let table = store.tensor(pre.table);
        // oracle: elementwise max over a token set, computed directly
        let pooled = |ids: &[u32]| -> Vec<f64> {
            (0..8)
                .map(|j| ids.iter().map(|&t| table.at(t as usize, j)).fold(f64::MIN, f64::max))
                .collect()
        };
        let base = vec![3u32, 7, 11, 15];
        let target = pooled(&base);
        // a word dominated by the pooled vector adds nothing
        let extra = (3..20u32)
            .find(|&t| !base.contains(&t) && (0..8).all(|j| table.at(t as usize, j) <= target[j]));
        let other: Vec<u32> = match extra {
            Some(t) => [base.clone(), vec![t]].concat(),
            None => base.iter().rev().copied().collect(),
        };
        assert_eq!(pooled(&other), target);
        assert_eq!(
            embed_rows(&store, &pre, &[base]),
            embed_rows(&store, &pre, &[other])
        );
    }

    fn cell(input: usize, rec: usize, hidden: usize, seed: u64) -> (ParamStore, LstmCell) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = LstmCell::init(&mut store, "c", input, rec, hidden, &mut rng).unwrap();
        (store, c)
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let (store, c) = cell(3, 2, 2, 0);
        assert_eq!(store.tensor(c.bias).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_cell_and_input_give_zero_state() {
        let (mut store, c) = cell(3, 2, 2, 0);
        zero_all(&mut store);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let h = g.constant(Tensor::zeros(&[1, 2]));
        let cp = g.constant(Tensor::zeros(&[1, 2]));
        let (h, cn) = c.step(&mut g, x, h, cp).unwrap();
        assert_eq!(g.value(h).data(), &[0.0, 0.0]);
        assert_eq!(g.value(cn).data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_keeps_cell_state() {
        let (mut store, c) = cell(3, 2, 2, 0);
        zero_all(&mut store);
        let b = store.data_mut(c.bias);
        // input gate -> 0, forget gate -> 1
        b[0..2].fill(-800.0);
        b[2..4].fill(800.0);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::from_rows(&[vec![0.3, -0.2, 0.9]]).unwrap());
        let h = g.constant(Tensor::zeros(&[1, 2]));
        let cp = g.constant(Tensor::from_rows(&[vec![0.7, -1.3]]).unwrap());
        let (_, cn) = c.step(&mut g, x, h, cp).unwrap();
        assert_eq!(g.value(cn).data(), &[0.7, -1.3]);
    }

    #[test]
    fn lstm_step_rejects_bad_dims() {
        let (store, c) = cell(3, 2, 2, 0);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let h = g.constant(Tensor::zeros(&[1, 2]));
        let cp = g.constant(Tensor::zeros(&[1, 2]));
        assert!(c.step(&mut g, x, h, cp).is_err());
    }

    #[test]
    fn three_chained_steps_match_differences() {
        let (mut store, c) = cell(3, 2, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs = store.add_uniform("xs", &[3, 3], 1.0, &mut rng).unwrap();
        let report = grad_check(
            &store,
            |g| {
                let xs = g.param(xs);
                let mut h = g.constant(Tensor::zeros(&[1, 2]));
                let mut cs = g.constant(Tensor::zeros(&[1, 2]));
                for t in 0..3 {
                    let x = g.slice(xs, 0, t, 1)?;
                    (h, cs) = c.step(g, x, h, cs)?;
                }
                let hc = g.mul(h, cs)?;
                let s = g.sum_all(hc)?;
                let t = g.sum_all(h)?;
                g.add(s, t)
            },
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    fn fce_setup(seed: u64) -> (ParamStore, FceCells) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = FceCells {
            g_fwd: LstmCell::init(&mut store, "gf", EMBED_DIM, EMBED_DIM, EMBED_DIM, &mut rng)
                .unwrap(),
            g_bwd: LstmCell::init(&mut store, "gb", EMBED_DIM, EMBED_DIM, EMBED_DIM, &mut rng)
                .unwrap(),
            f_cell: LstmCell::init(&mut store, "f", EMBED_DIM, 2 * EMBED_DIM, EMBED_DIM, &mut rng)
                .unwrap(),
        };
        (store, cells)
    }

    fn random_rows(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            &[n, EMBED_DIM],
            (0..n * EMBED_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn run_g(store: &ParamStore, cells: &FceCells, rows: &Tensor) -> Tensor {
        let mut g = Graph::with_params(store);
        let s = g.constant(rows.clone());
        let out = fce_g(&mut g, s, &cells.g_fwd, &cells.g_bwd).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn zero_weight_fce_g_is_identity() {
        let (mut store, cells) = fce_setup(1);
        zero_all(&mut store);
        let rows = random_rows(4, 2);
        assert_eq!(run_g(&store, &cells, &rows), rows);
    }

    #[test]
    fn single_row_fce_g_sums_both_directions() {
        let (store, cells) = fce_setup(3);
        let rows = random_rows(1, 4);
        let out = run_g(&store, &cells, &rows);
        let mut g = Graph::with_params(&store);
        let x = g.constant(rows.clone());
        let z = g.constant(Tensor::zeros(&[1, EMBED_DIM]));
        let (hf, _) = cells.g_fwd.step(&mut g, x, z, z).unwrap();
        let (hb, _) = cells.g_bwd.step(&mut g, x, z, z).unwrap();
        for j in 0..EMBED_DIM {
            let want = g.value(hf).data()[j] + g.value(hb).data()[j] + rows.data()[j];
            assert!((out.data()[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn fce_g_rows_depend_on_other_rows() {
        let (store, cells) = fce_setup(5);
        let rows = random_rows(3, 6);
        let base = run_g(&store, &cells, &rows);
        let mut changed = rows.clone();
        for j in 0..EMBED_DIM {
            changed.data_mut()[EMBED_DIM + j] += 0.5;
        }
        let out = run_g(&store, &cells, &changed);
        for i in [0, 2] {
            let diff: f64 = (0..EMBED_DIM)
                .map(|j| (out.at(i, j) - base.at(i, j)).abs())
                .sum();
            assert!(diff > 1e-6, "row {i} unchanged");
        }
    }

    #[test]
    fn fce_g_is_order_sensitive() {
        let (store, cells) = fce_setup(7);
        let rows = random_rows(3, 8);
        let base = run_g(&store, &cells, &rows);
        let permuted = Tensor::from_rows(&[rows.row(2).to_vec(), rows.row(1).to_vec(), rows.row(0).to_vec()])
            .unwrap();
        let out = run_g(&store, &cells, &permuted);
        // row 1 is the same example in both orders but sees a different context
        let diff: f64 = (0..EMBED_DIM).map(|j| (out.at(1, j) - base.at(1, j)).abs()).sum();
        assert!(diff > 1e-9);
    }

    fn run_f(store: &ParamStore, cells: &FceCells, q: &Tensor, s: &Tensor, k: usize) -> (Tensor, Vec<Tensor>) {
        let mut g = Graph::with_params(store);
        let qv = g.constant(q.clone());
        let sv = g.constant(s.clone());
        let (h, att) = fce_f(&mut g, qv, sv, k, &cells.f_cell).unwrap();
        (
            g.value(h).clone(),
            att.iter().map(|&a| g.value(a).clone()).collect(),
        )
    }

    #[test]
    fn zero_weight_fce_f_returns_query() {
        let (mut store, cells) = fce_setup(9);
        zero_all(&mut store);
        let q = random_rows(3, 10);
        let s = random_rows(5, 11);
        for k in [1, 2, 5] {
            assert_eq!(run_f(&store, &cells, &q, &s, k).0, q);
        }
    }

    #[test]
    fn fce_f_attention_rows_are_distributions() {
        let (store, cells) = fce_setup(12);
        let q = random_rows(4, 13);
        let s = random_rows(5, 14);
        let (_, att) = run_f(&store, &cells, &q, &s, 5);
        assert_eq!(att.len(), 5);
        for a in att {
            assert_eq!(a.shape(), &[4, 5]);
            for r in 0..4 {
                let sum: f64 = a.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(a.row(r).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn fce_f_rejects_zero_steps() {
        let (store, cells) = fce_setup(1);
        let mut g = Graph::with_params(&store);
        let q = g.constant(random_rows(1, 1));
        let s = g.constant(random_rows(2, 2));
        assert!(fce_f(&mut g, q, s, 0, &cells.f_cell).is_err());
    }

    /// Straight-line single attLSTM step with plain vectors.
    fn unrolled_one_step(store: &ParamStore, cell: &LstmCell, q: &[f64], s: &Tensor) -> Vec<f64> {
        let h = EMBED_DIM;
        let n = s.rows();
        // h0 = 0: attention logits all zero, so the readout is the mean row
        let r: Vec<f64> = (0..h)
            .map(|j| (0..n).map(|i| s.at(i, j)).sum::<f64>() / n as f64)
            .collect();
        let rec: Vec<f64> = vec![0.0; h].into_iter().chain(r).collect();
        let (wx, wh, b) = (
            store.tensor(cell.wx),
            store.tensor(cell.wh),
            store.tensor(cell.bias),
        );
        let z: Vec<f64> = (0..4 * h)
            .map(|col| {
                let a: f64 = (0..h).map(|i| q[i] * wx.at(i, col)).sum();
                let c: f64 = (0..2 * h).map(|i| rec[i] * wh.at(i, col)).sum();
                a + c + b.data()[col]
            })
            .collect();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        (0..h)
            .map(|j| {
                let i = sig(z[j]);
                let o = sig(z[2 * h + j]);
                let cand = z[3 * h + j].tanh();
                let c = i * cand; // c0 = 0
                o * c.tanh() + q[j]
            })
            .collect()
    }

    #[test]
    fn one_step_fce_f_matches_unrolled_oracle() {
        let (store, cells) = fce_setup(15);
        let q = random_rows(2, 16);
        let s = random_rows(3, 17);
        let (out, _) = run_f(&store, &cells, &q, &s, 1);
        for b in 0..2 {
            let want = unrolled_one_step(&store, &cells.f_cell, q.row(b), &s);
            for j in 0..EMBED_DIM {
                assert!((out.at(b, j) - want[j]).abs() < 1e-12);
            }
        }
    }

    fn encoder(fce: FceConfig, seed: u64) -> (ParamStore, EpisodeEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EpisodeEncoder::init(&mut store, 30, 16, &fce, &mut rng).unwrap();
        (store, enc)
    }

    fn query_embedding(store: &ParamStore, enc: &EpisodeEncoder, support: &[Vec<u32>]) -> Tensor {
        let mut g = Graph::with_params(store);
        let e = enc
            .embed_episode(&mut g, support, &[vec![5, 6, 2], vec![9, 2]])
            .unwrap();
        assert_eq!(g.value(e.support).shape(), &[support.len(), EMBED_DIM]);
        assert_eq!(g.value(e.query).shape(), &[2, EMBED_DIM]);
        g.value(e.query).clone()
    }

    #[test]
    fn query_embedding_ignores_supports_without_fce() {
        let (store, enc) = encoder(FceConfig::disabled(), 1);
        let a = query_embedding(&store, &enc, &[vec![10, 2], vec![11, 2]]);
        let b = query_embedding(&store, &enc, &[vec![20, 21, 2], vec![12, 2]]);
        assert_eq!(a, b);
    }

    #[test]
    fn query_embedding_depends_on_supports_with_fce() {
        let (store, enc) = encoder(FceConfig::default(), 1);
        let a = query_embedding(&store, &enc, &[vec![10, 2], vec![11, 2]]);
        let b = query_embedding(&store, &enc, &[vec![20, 21, 2], vec![11, 2]]);
        assert_ne!(a, b);
    }

    #[test]
    fn fce_config_validation() {
        assert!(FceConfig { steps: 0, ..FceConfig::default() }.validate().is_err());
        assert!(FceConfig { hidden: 32, ..FceConfig::default() }.validate().is_err());
        assert!(FceConfig { steps: 0, ..FceConfig::disabled() }.validate().is_ok());
    }
}
