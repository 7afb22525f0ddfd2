use bhg_core::corpus::{synth_corpus, Conversation, FeatureCorpus, SynthSpec};
use bhg_core::model::{Model, ModelConfig, Task};
use bhg_core::params::Parameters;
use bhg_core::training::{evaluate_corpus, split_corpus, train, AdamW, LinearWarmup, OptimizerConfig, TrainConfig};
use bhg_core::Error;

fn small_model() -> Model {
    let corpus = synth_corpus(&SynthSpec {
        n_conversations: 1,
        d_h: 8,
        d_k: 4,
        ..SynthSpec::default()
    })
    .unwrap();
    Model::for_corpus(
        &corpus,
        &ModelConfig {
            heads: 2,
            layers: 1,
            ..ModelConfig::default()
        },
        1,
    )
    .unwrap()
}

#[test]
fn decay_is_decoupled_from_the_gradient() {
    let model = small_model();
    let zero = model.zeros_like();
    let mut stepped = model.clone();
    let lr = 0.05;
    AdamW::new(&model, OptimizerConfig::default()).step(&mut stepped, &zero, lr);
    for (before, after) in model.params().iter().zip(stepped.params()) {
        for (x, y) in before.data.iter().zip(after.data) {
            if before.decay {
                assert_eq!(*y, x - lr * 0.01 * x, "{}", before.name);
            } else {
                assert_eq!(y, x, "{}", before.name);
            }
        }
    }
}

#[test]
fn decay_exemption_is_configurable() {
    let model = small_model();
    let cfg = OptimizerConfig {
        exempt_biases_and_embeddings: false,
        ..OptimizerConfig::default()
    };
    let mut stepped = model.clone();
    AdamW::new(&model, cfg).step(&mut stepped, &model.zeros_like(), 0.1);
    let embed = stepped.params().into_iter().find(|p| p.name == "mhgt.f_embed").unwrap().data.to_vec();
    let orig = model.params().into_iter().find(|p| p.name == "mhgt.f_embed").unwrap().data.to_vec();
    for (y, x) in embed.iter().zip(&orig) {
        assert_eq!(*y, x - 0.1 * 0.01 * x);
    }
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let model = small_model();
    let cfg = OptimizerConfig {
        weight_decay: 0.0,
        ..OptimizerConfig::default()
    };
    let mut stepped = model.clone();
    let mut opt = AdamW::new(&model, cfg);
    for _ in 0..3 {
        opt.step(&mut stepped, &model.zeros_like(), 1.0);
    }
    assert_eq!(stepped, model);
}

#[test]
fn first_adam_step_moves_by_lr_times_sign() {
    let model = small_model();
    let mut grads = model.zeros_like();
    for p in grads.params_mut() {
        for (i, g) in p.data.iter_mut().enumerate() {
            *g = if i % 2 == 0 { 3.0 } else { -0.5 };
        }
    }
    let cfg = OptimizerConfig {
        weight_decay: 0.0,
        ..OptimizerConfig::default()
    };
    let mut stepped = model.clone();
    AdamW::new(&model, cfg).step(&mut stepped, &grads, 1e-3);
    for (before, after) in model.params().iter().zip(stepped.params()) {
        for (i, (x, y)) in before.data.iter().zip(after.data).enumerate() {
            let g: f64 = if i % 2 == 0 { 3.0 } else { -0.5 };
            let expected = x - 1e-3 * g / (g.abs() + 1e-8);
            assert!((y - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn default_schedule_peaks_at_one_fifth() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.optimizer.lr_peak, 1e-5);
    assert_eq!(cfg.batch_size, 16);
    assert_eq!(cfg.model.layers, 3);
    assert_eq!((cfg.graph.forward_window, cfg.graph.backward_window), (5, 5));
    assert_eq!(cfg.alpha, 0.8);
    let s = LinearWarmup::new(cfg.optimizer.lr_peak, 500, cfg.schedule.warmup_ratio);
    assert_eq!(s.lr(100), 1e-5);
    assert_eq!(s.lr(500), 0.0);
}

fn separable(seed: u64) -> FeatureCorpus {
    synth_corpus(&SynthSpec::separable(seed)).unwrap()
}

/// A perceptron on raw utterance features reaches zero training error,
/// so the fixture is linearly separable.
#[test]
fn separable_fixture_is_linearly_separable() {
    let corpus = separable(0);
    let items: Vec<(&[f64], usize)> = corpus
        .conversations
        .iter()
        .flat_map(|c| c.utterances.iter().map(|u| (u.feature.as_slice(), u.emotion.unwrap())))
        .collect();
    let d = corpus.dims.d_h;
    let mut w = vec![0.0; d + 1];
    let mut converged = false;
    for _ in 0..1000 {
        let mut mistakes = 0;
        for (x, y) in &items {
            let sign = if *y == 1 { 1.0 } else { -1.0 };
            let score = w[d] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            if sign * score <= 0.0 {
                mistakes += 1;
                for k in 0..d {
                    w[k] += sign * x[k];
                }
                w[d] += sign;
            }
        }
        if mistakes == 0 {
            converged = true;
            break;
        }
    }
    assert!(converged);
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 6,
        val_fraction: 0.0,
        patience: None,
        ..TrainConfig::desk()
    }
}

#[test]
fn loss_decreases_over_the_first_five_epochs() {
    let corpus = separable(0);
    for seed in 0..5 {
        let out = train(&corpus, &TrainConfig { epochs: 5, ..quick_cfg(seed) }).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|r| r.loss).collect();
        assert_eq!(losses.len(), 5);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {losses:?}");
    }
}

#[test]
fn training_is_bitwise_reproducible_across_worker_counts() {
    let corpus = separable(1);
    let cfg = TrainConfig {
        epochs: 3,
        val_fraction: 0.25,
        ..TrainConfig::desk()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(&corpus, &cfg).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.history, b.history);
    assert_eq!(a.best, b.best);
    for (x, y) in a.history.iter().zip(&b.history) {
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
    }
}

#[test]
fn history_and_selection_bookkeeping() {
    let corpus = separable(2);
    let cfg = TrainConfig {
        epochs: 4,
        val_fraction: 0.25,
        patience: Some(1),
        ..TrainConfig::desk()
    };
    let out = train(&corpus, &cfg).unwrap();
    assert!(!out.history.is_empty() && out.history.len() <= 4);
    assert!(out.history.iter().all(|r| r.val_metric.is_some()));
    let best = out.history[out.best_epoch - 1].val_metric.unwrap();
    assert_eq!(best, out.best_metric);
    assert!(out.history.iter().all(|r| r.val_metric.unwrap() <= best));
    assert_eq!(out.split.train.len() + out.split.val.len(), 64);
    assert_eq!(out.split.val.len(), 16);
    assert_eq!(out.history.last().unwrap().step, 6 * out.history.len() as u64);
}

#[test]
fn split_is_disjoint_and_seeded() {
    let corpus = separable(3);
    let a = split_corpus(&corpus, 0.1, 5);
    let b = split_corpus(&corpus, 0.1, 5);
    let c = split_corpus(&corpus, 0.1, 6);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.val.iter().all(|id| !a.train.contains(id)));
}

#[test]
fn cee_without_cause_pairs_is_rejected() {
    let mut corpus = separable(4);
    corpus.conversations[3].cause_pairs = None;
    let cfg = TrainConfig {
        task: Task::Cee,
        ..quick_cfg(0)
    };
    assert!(matches!(train(&corpus, &cfg), Err(Error::TaskLabels(_))));
}

#[test]
fn non_finite_loss_aborts() {
    let mut corpus = separable(5);
    corpus.conversations[0].utterances[0].feature[0] = f64::NAN;
    let cfg = TrainConfig {
        batch_size: 64,
        ..quick_cfg(0)
    };
    assert!(matches!(train(&corpus, &cfg), Err(Error::NonFiniteLoss { epoch: 1, step: 1, .. })));
}

#[test]
fn empty_corpus_is_rejected() {
    let mut corpus = separable(6);
    corpus.conversations.clear();
    assert!(matches!(train(&corpus, &quick_cfg(0)), Err(Error::EmptyCorpus)));
    let model = small_model();
    assert!(evaluate_corpus(&model, &corpus, &quick_cfg(0)).is_err());
}

#[test]
fn reports_carry_the_task_metrics() {
    let mut corpus = separable(7);
    corpus.emotion_set = vec!["neutral".into(), "joy".into()];
    let model = Model::for_corpus(&corpus, &TrainConfig::desk().model, 0).unwrap();
    let erc = evaluate_corpus(&model, &corpus, &quick_cfg(0)).unwrap();
    assert!(erc.weighted_f1.is_some() && erc.micro_f1_excl_neutral.is_some());
    assert_eq!(erc.n_items, 64 * 6);
    let cee = evaluate_corpus(&model, &corpus, &TrainConfig { task: Task::Cee, ..quick_cfg(0) }).unwrap();
    assert!(cee.neg_f1.is_some() && cee.pos_f1.is_some());
    assert!(cee.weighted_f1.is_none());
    let n_targets: usize = corpus
        .conversations
        .iter()
        .flat_map(|c: &Conversation| c.utterances.iter())
        .filter(|u| u.emotion != Some(0))
        .map(|u| u.index)
        .sum();
    assert_eq!(cee.n_items, n_targets);
}

#[test]
fn invalid_configs_are_rejected() {
    let corpus = separable(8);
    for cfg in [
        TrainConfig { batch_size: 0, ..quick_cfg(0) },
        TrainConfig { val_fraction: 1.0, ..quick_cfg(0) },
        TrainConfig { alpha: -1.0, ..quick_cfg(0) },
    ] {
        assert!(matches!(train(&corpus, &cfg), Err(Error::InvalidConfig(_))));
    }
}
