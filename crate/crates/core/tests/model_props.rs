use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fewshot_core::autodiff::{Graph, ParamStore};
use fewshot_core::embeddings::{FceConfig, PreEmbedder};
use fewshot_core::episodes::{build_tasks, ingest, split_vocab, EpisodeSampler, EpisodeSpec, SplitRole, PAPER_SPLIT_SIZES};
use fewshot_core::metrics::MetricKind;
use fewshot_core::models::{attention_probs, matching_probs, Model, ModelConfig, ModelKind};
use fewshot_core::synthetic::separable_corpus;
use fewshot_core::Tensor;

fn rows(n: usize, d: usize, scale: f64) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-scale..scale, d), n)
}

fn pre_embedder(vocab: usize, seed: u64) -> (ParamStore, PreEmbedder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pre = PreEmbedder::init(&mut store, "pre", vocab, 8, &mut rng).unwrap();
    (store, pre)
}

fn embed(store: &ParamStore, pre: &PreEmbedder, s: Vec<u32>) -> Vec<f64> {
    let mut g = Graph::with_params(store);
    let v = pre.embed(&mut g, &[s]).unwrap();
    g.value(v).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pre_embedding_ignores_order_and_duplicates(
        tokens in prop::collection::vec(3u32..30, 1..8),
        perm_seed in any::<u64>(),
        dup in any::<prop::sample::Index>(),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let (store, pre) = pre_embedder(30, seed);
        let mut shuffled = tokens.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        shuffled.push(*dup.get(&tokens));
        prop_assert_eq!(embed(&store, &pre, tokens), embed(&store, &pre, shuffled));
    }

    #[test]
    fn matching_prediction_ignores_score_shifts(
        scores in rows(4, 6, 5.0),
        shift in -20.0f64..20.0,
    ) {
        let classes = [0, 1, 2, 0, 1, 2];
        let shifted: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|x| x + shift).collect()).collect();
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&scores).unwrap());
        let b = g.constant(Tensor::from_rows(&shifted).unwrap());
        let (pa, _) = attention_probs(&mut g, a, &classes, 3).unwrap();
        let (pb, _) = attention_probs(&mut g, b, &classes, 3).unwrap();
        for (x, y) in g.value(pa).data().iter().zip(g.value(pb).data()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn cosine_matching_ignores_embedding_scale(
        q in rows(3, 8, 1.0),
        s in rows(4, 8, 1.0),
        alpha in 1e-2f64..1e2,
    ) {
        prop_assume!(q.iter().chain(&s).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-4));
        let classes = [0, 1, 0, 1];
        let scale = |m: &[Vec<f64>]| -> Vec<Vec<f64>> { m.iter().map(|r| r.iter().map(|x| x * alpha).collect()).collect() };
        let probs = |q: &[Vec<f64>], s: &[Vec<f64>]| -> Vec<f64> {
            let mut g = Graph::new();
            let qv = g.constant(Tensor::from_rows(q).unwrap());
            let sv = g.constant(Tensor::from_rows(s).unwrap());
            let (p, _) = matching_probs(&mut g, &MetricKind::Cosine, qv, sv, &classes, 2).unwrap();
            g.value(p).data().to_vec()
        };
        let (a, b) = (probs(&q, &s), probs(&scale(&q), &scale(&s)));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_prediction_row_is_a_distribution(
        kind in prop::sample::select(ModelKind::ALL.to_vec()),
        metric in prop::sample::select(MetricKind::table_order().to_vec()),
        n in 2usize..6,
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        let corpus = ingest(separable_corpus(60, 6, 3).as_bytes()).unwrap();
        let tasks = build_tasks(&corpus, 5).unwrap();
        let split = split_vocab(&tasks, PAPER_SPLIT_SIZES, 1, 5).unwrap();
        let spec = EpisodeSpec::new(n, k, 7).unwrap();
        let sampler = EpisodeSampler::new(&corpus, &tasks, split.words(SplitRole::Train), spec).unwrap();
        let ep = sampler.sample_seeded(seed).unwrap();
        let mut cfg = ModelConfig::of_kind(kind);
        cfg.metric = metric;
        cfg.word_dim = 8;
        cfg.fce = FceConfig { steps: 2, ..cfg.fce };
        let model = Model::init(cfg, corpus.vocab.len(), seed).unwrap();
        let p = model.predict(&ep).unwrap();
        prop_assert_eq!(p.shape(), &[7, n][..]);
        for i in 0..p.rows() {
            prop_assert!(p.row(i).iter().all(|&x| x >= 0.0));
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
