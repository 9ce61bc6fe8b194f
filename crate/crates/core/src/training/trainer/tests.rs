use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::*;
use crate::embeddings::FceConfig;
use crate::episodes::{build_tasks, ingest, split_vocab, EpisodeSpec, PAPER_SPLIT_SIZES};
use crate::models::ModelConfig;
use crate::synthetic::{label_word, separable_corpus};
use crate::tensor::Tensor;
use crate::training::{evaluate, OptimizerConfig};

struct Fixture {
    corpus: Corpus,
    tasks: TaskIndex,
    split: VocabSplit,
}

impl Fixture {
    fn separable(words: usize) -> Self {
        let corpus = ingest(separable_corpus(words, 6, 3).as_bytes()).unwrap();
        let tasks = build_tasks(&corpus, 3).unwrap();
        let split = split_vocab(&tasks, PAPER_SPLIT_SIZES, 5, 2).unwrap();
        Self { corpus, tasks, split }
    }

    fn data(&self) -> TrainData<'_> {
        TrainData {
            corpus: &self.corpus,
            tasks: &self.tasks,
            split: &self.split,
        }
    }
}

fn small_config(kind: ModelKind) -> TrainConfig {
    let mut model = ModelConfig::of_kind(kind);
    model.word_dim = 16;
    model.fce = FceConfig {
        steps: 2,
        ..FceConfig::default()
    };
    TrainConfig {
        model,
        spec: EpisodeSpec::new(2, 1, 4).unwrap(),
        steps: 12,
        eval_every: 4,
        eval_episodes: 6,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn param_hash(m: &Model) -> u64 {
    let mut h = DefaultHasher::new();
    for (_, p) in m.params.iter() {
        p.name.hash(&mut h);
        for v in p.tensor.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

fn repeated_batch(fx: &Fixture, kind: ModelKind) -> TrainBatch {
    let cfg = small_config(kind);
    let sampler = fx.data().sampler(SplitRole::Train, &cfg).unwrap();
    if kind == ModelKind::Siamese {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        TrainBatch::Pairs(sampler.sample_pairs(&mut r, 8).unwrap())
    } else {
        TrainBatch::Episode(sampler.sample_seeded(2).unwrap())
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let fx = Fixture::separable(20);
    for kind in ModelKind::ALL {
        let cfg = small_config(kind);
        let mut model = Model::init(cfg.model.clone(), fx.corpus.vocab.len(), 1).unwrap();
        let before = model.params.clone();
        for opt_cfg in [OptimizerConfig::Sgd { lr: 0.0 }, OptimizerConfig::default().with_lr(0.0)] {
            let mut opt = Optimizer::new(opt_cfg, &model.params);
            let stats = train_step(&mut model, &mut opt, &repeated_batch(&fx, kind), 5.0).unwrap();
            assert!(stats.loss.is_finite() && stats.loss > 0.0);
            assert_eq!(model.params, before, "{kind}");
        }
    }
}

#[test]
fn repeated_separable_batch_loss_strictly_decreases() {
    let fx = Fixture::separable(20);
    for kind in ModelKind::ALL {
        let cfg = small_config(kind);
        let mut model = Model::init(cfg.model.clone(), fx.corpus.vocab.len(), 3).unwrap();
        // small-step gradient descent on a fixed batch
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.05 }, &model.params);
        let batch = repeated_batch(&fx, kind);
        let losses: Vec<f64> = (0..50)
            .map(|_| train_step(&mut model, &mut opt, &batch, 5.0).unwrap().loss)
            .collect();
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{kind}: {losses:?}");
        }
    }
}

#[test]
fn same_seed_same_trace_and_checkpoint() {
    let fx = Fixture::separable(20);
    let run = || {
        let mut t = Trainer::new(small_config(ModelKind::Matching), fx.corpus.vocab.len()).unwrap();
        let mut log = Vec::new();
        let losses = t.run(fx.data(), |r, _| {
            log.push((r.step, r.val_accuracy));
            Ok(())
        });
        (losses.unwrap(), log, t.checkpoint().to_bytes().unwrap())
    };
    let (l1, g1, c1) = run();
    let (l2, g2, c2) = run();
    assert_eq!(l1.len(), 12);
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
    assert_eq!(g1.iter().map(|r| r.0).collect::<Vec<_>>(), [4, 8, 12]);
    assert_eq!(c1, c2);
}

#[test]
fn zero_steps_checkpoint_is_the_initialisation() {
    let fx = Fixture::separable(20);
    let mut cfg = small_config(ModelKind::Prototypical);
    cfg.steps = 0;
    let mut t = Trainer::new(cfg.clone(), fx.corpus.vocab.len()).unwrap();
    let losses = t.run(fx.data(), |_, _| Ok(())).unwrap();
    assert!(losses.is_empty());
    let init = Model::init(cfg.model, fx.corpus.vocab.len(), cfg.seed).unwrap();
    assert_eq!(t.checkpoint().model().unwrap().params, init.params);
}

#[test]
fn resumed_run_reproduces_straight_run() {
    let fx = Fixture::separable(20);
    for kind in [ModelKind::Matching, ModelKind::Siamese] {
        let cfg = small_config(kind);
        let mut straight = Trainer::new(cfg.clone(), fx.corpus.vocab.len()).unwrap();
        let full = straight.run(fx.data(), |_, _| Ok(())).unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.steps = 5;
        let mut first = Trainer::new(half_cfg, fx.corpus.vocab.len()).unwrap();
        let mut trace = first.run(fx.data(), |_, _| Ok(())).unwrap();
        let bytes = first.checkpoint().to_bytes().unwrap();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let mut second = Trainer::from_checkpoint(&ckpt, Some(cfg.steps)).unwrap();
        trace.extend(second.run(fx.data(), |_, _| Ok(())).unwrap());

        assert_eq!(trace, full, "{kind}");
        assert_eq!(second.model.params, straight.model.params);
    }
}

#[test]
fn best_checkpoint_ties_keep_the_earliest_step() {
    let fx = Fixture::separable(20);
    let mut t = Trainer::new(small_config(ModelKind::Matching), fx.corpus.vocab.len()).unwrap();
    let ids: Vec<_> = t.model.params.ids().collect();
    for id in ids {
        t.model.params.set_trainable(id, false);
    }
    let mut bests = Vec::new();
    t.run(fx.data(), |r, _| {
        bests.push(r.best);
        Ok(())
    })
    .unwrap();
    assert_eq!(bests, [true, false, false]);
    assert_eq!(t.best_step, Some(4));
    assert_eq!(t.best_checkpoint().unwrap().meta.step, 4);
}

#[test]
fn best_checkpoint_tracks_the_maximum() {
    let fx = Fixture::separable(20);
    let mut t = Trainer::new(small_config(ModelKind::Prototypical), fx.corpus.vocab.len()).unwrap();
    let mut seen = Vec::new();
    t.run(fx.data(), |r, _| {
        seen.push((r.step, r.val_accuracy));
        Ok(())
    })
    .unwrap();
    let max = seen.iter().map(|s| s.1).fold(f64::MIN, f64::max);
    let first_max = seen.iter().find(|s| s.1 == max).unwrap().0;
    assert_eq!(t.best_val_accuracy, Some(max));
    assert_eq!(t.best_step, Some(first_max));
}

#[test]
fn evaluation_does_not_touch_parameters() {
    let fx = Fixture::separable(20);
    let cfg = small_config(ModelKind::Matching);
    let model = Model::init(cfg.model.clone(), fx.corpus.vocab.len(), 4).unwrap();
    let sampler = fx.data().sampler(SplitRole::Validation, &cfg).unwrap();
    let before = param_hash(&model);
    let a = evaluate(&model, &sampler, 20, 9).unwrap();
    assert_eq!(param_hash(&model), before);
    let b = evaluate(&model, &sampler, 20, 9).unwrap();
    assert_eq!(a, b);
    assert!(a.per_episode.iter().all(|&x| (0.0..=1.0).contains(&x)));
}

#[test]
fn one_hot_oracle_embedding_is_perfect() {
    let fx = Fixture::separable(40);
    let mut cfg = small_config(ModelKind::Matching);
    cfg.model.word_dim = EMBED;
    cfg.model.fce = FceConfig::disabled();
    cfg.spec = EpisodeSpec::new(5, 1, 20).unwrap();
    let mut model = Model::init(cfg.model.clone(), fx.corpus.vocab.len(), 0).unwrap();
    let vocab = &fx.corpus.vocab;
    let mut table = Tensor::zeros(&[vocab.len(), EMBED]);
    for w in 0..40 {
        for j in 0..6 {
            let id = vocab.id(&format!("c{w}_{j}")).unwrap() as usize;
            table.data_mut()[id * EMBED + w] = 1.0;
        }
    }
    let mut eye = Tensor::zeros(&[EMBED, EMBED]);
    for i in 0..EMBED {
        eye.data_mut()[i * EMBED + i] = 1.0;
    }
    let p = &mut model.params;
    p.set(p.id("pre.word_table").unwrap(), table).unwrap();
    p.set(p.id("pre.proj.w").unwrap(), eye).unwrap();
    let split = VocabSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: (0..40).map(|w| vocab.id(&label_word(w)).unwrap()).collect(),
        seed: 0,
    };
    let sampler = EpisodeSampler::new(&fx.corpus, &fx.tasks, split.words(SplitRole::Test), cfg.spec).unwrap();
    let report = evaluate(&model, &sampler, 50, 0).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(report.stderr, 0.0);
}

const EMBED: usize = crate::embeddings::EMBED_DIM;

#[test]
fn non_finite_loss_names_step_and_seed() {
    let fx = Fixture::separable(20);
    let mut t = Trainer::new(small_config(ModelKind::Matching), fx.corpus.vocab.len()).unwrap();
    let id = t.model.params.id("pre.proj.w").unwrap();
    t.model.params.data_mut(id)[0] = f64::NAN;
    let sampler = fx.data().sampler(SplitRole::Train, &t.config).unwrap();
    match t.step_once(&sampler) {
        Err(Error::Diverged { step: 1, .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|s| s.loss)),
    }
}
