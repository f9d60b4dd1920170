use std::cell::RefCell;
use std::collections::BTreeMap;

use doge_core::data::{generate, DomainCorpus, DomainSplit, Example, Label, SyntheticTaskSpec};
use doge_core::model::{ElementId, EncoderParams, MaskSet, ModelConfig, Owner, TaskKind};
use doge_core::train::{finetune, rewind_and_retrain, Checkpoint, TrainConfig, Trainer};
use doge_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Class 0 iff token 3 appears; the other positions are noise from 5..20.
fn separable_corpus(n: usize, seed: u64) -> DomainCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exs: Vec<Example> = (0..n)
        .map(|_| {
            let y = rng.random_range(0..2usize);
            let mut tokens: Vec<usize> = (0..5).map(|_| rng.random_range(5..20)).collect();
            if y == 0 {
                tokens[rng.random_range(0..5)] = 3;
            }
            tokens.insert(0, 2);
            Example { tokens, label: Label::Class(y), domain: "toy".into() }
        })
        .collect();
    let dev = exs.split_off(n * 9 / 10);
    DomainCorpus {
        train_domains: BTreeMap::from([("toy".to_string(), DomainSplit { train: exs, dev })]),
        test_domains: BTreeMap::new(),
        num_classes: 2,
        vocab_size: 20,
        task: TaskKind::SequenceClassification,
    }
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 16,
        d_head: 8,
        d_inner: 32,
        max_len: 8,
        vocab_size: 20,
        num_classes: 2,
        task: TaskKind::SequenceClassification,
        seed: 0,
    }
}

fn fast_train() -> TrainConfig {
    TrainConfig { learning_rate: 2e-3, batch_size: 8, max_epochs: 10, dropout: 0.0, ..Default::default() }
}

#[test]
fn overfits_a_separable_toy_task() {
    let corpus = separable_corpus(200, 1);
    let cfg = toy_model();
    let out = finetune(EncoderParams::init(&cfg, 0).unwrap(), &MaskSet::ones(&cfg), &corpus, &fast_train()).unwrap();
    let best = out.best.dev_metric.unwrap();
    assert!(best >= 0.95, "dev accuracy {best}; log {:?}", out.log);
    assert!(out.log.rows.len() <= 10);
}

#[test]
fn early_stopping_never_selects_a_worse_checkpoint() {
    let corpus = separable_corpus(200, 2);
    let cfg = toy_model();
    let out = finetune(EncoderParams::init(&cfg, 0).unwrap(), &MaskSet::ones(&cfg), &corpus, &fast_train()).unwrap();
    let max = out.log.rows.iter().map(|r| r.dev_metric).fold(f64::MIN, f64::max);
    assert_eq!(out.best.dev_metric, Some(max));
    let first_best = out.log.rows.iter().find(|r| r.dev_metric == max).unwrap();
    assert_eq!(out.best.step, first_best.step);
}

#[test]
fn patience_zero_stops_after_first_non_improving_epoch() {
    let corpus = separable_corpus(100, 3);
    let cfg = toy_model();
    let tc = TrainConfig { patience: 0, max_epochs: 30, ..fast_train() };
    let out = finetune(EncoderParams::init(&cfg, 0).unwrap(), &MaskSet::ones(&cfg), &corpus, &tc).unwrap();
    let rows = &out.log.rows;
    let mut best = f64::MIN;
    for (i, r) in rows.iter().enumerate() {
        if r.dev_metric > best {
            best = r.dev_metric;
        } else {
            assert_eq!(i, rows.len() - 1, "training continued past a non-improving epoch");
        }
    }
    if rows.len() < 30 {
        let last = rows.last().unwrap().dev_metric;
        assert!(rows[..rows.len() - 1].iter().any(|r| r.dev_metric >= last));
    }
}

#[test]
fn rewind_step_zero_is_the_initialization() {
    let corpus = separable_corpus(60, 4);
    let cfg = toy_model();
    let init = EncoderParams::init(&cfg, 7).unwrap();
    let tc = TrainConfig { max_epochs: 2, ..fast_train() };
    let out = finetune(init.clone(), &MaskSet::ones(&cfg), &corpus, &tc).unwrap();
    assert_eq!(out.rewind.params, init);
    assert_eq!(out.rewind.step, 0);
    assert_ne!(out.best.params, init);

    let later = TrainConfig { rewind_step: 3, ..tc.clone() };
    let out = finetune(init.clone(), &MaskSet::ones(&cfg), &corpus, &later).unwrap();
    assert_eq!(out.rewind.step, 3);
    let beyond = TrainConfig { rewind_step: 10_000, ..tc };
    assert!(matches!(finetune(init, &MaskSet::ones(&cfg), &corpus, &beyond), Err(Error::Config(_))));
}

#[test]
fn training_is_deterministic() {
    let corpus = separable_corpus(80, 5);
    let cfg = toy_model();
    let tc = TrainConfig { max_epochs: 3, dropout: 0.1, ..fast_train() };
    let run = || finetune(EncoderParams::init(&cfg, 1).unwrap(), &MaskSet::ones(&cfg), &corpus, &tc).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log.to_csv().unwrap(), b.log.to_csv().unwrap());
    assert_eq!(a.best.checksum(), b.best.checksum());
}

#[test]
fn retraining_with_nothing_pruned_replays_finetuning() {
    let corpus = separable_corpus(80, 6);
    let cfg = toy_model();
    let tc = TrainConfig { max_epochs: 3, dropout: 0.1, ..fast_train() };
    let ft = finetune(EncoderParams::init(&cfg, 2).unwrap(), &MaskSet::ones(&cfg), &corpus, &tc).unwrap();
    let rt = rewind_and_retrain(&ft.rewind, &MaskSet::ones(&cfg), &corpus, &tc).unwrap();
    assert_eq!(rt.log, ft.log);
    assert_eq!(rt.best.checksum(), ft.best.checksum());
}

#[test]
fn pruned_parameters_are_frozen_and_survivors_start_at_rewind() {
    let corpus = separable_corpus(80, 7);
    let cfg = toy_model();
    let tc = TrainConfig { max_epochs: 2, weight_decay: 0.1, ..fast_train() };
    let ft = finetune(EncoderParams::init(&cfg, 3).unwrap(), &MaskSet::ones(&cfg), &corpus, &tc).unwrap();
    let mut masks = MaskSet::ones(&cfg);
    masks.prune(ElementId::head(0, 1)).unwrap();
    masks.prune(ElementId::ffn(1)).unwrap();

    let seen: RefCell<Vec<(u64, EncoderParams)>> = RefCell::new(Vec::new());
    let rt = Trainer::new(&corpus, tc.clone())
        .observe(|step, p| seen.borrow_mut().push((step, p.clone())))
        .rewind_and_retrain(&ft.rewind, &masks)
        .unwrap();
    let seen = seen.into_inner();
    assert_eq!(seen[0].0, 0);
    for (a, b) in seen[0].1.tensors().iter().zip(ft.rewind.params.tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let slots = cfg_slots(&ft.rewind.params);
    let last = &seen.last().unwrap().1;
    for params in [last, &rt.best.params] {
        for ((owner, before), after) in slots.iter().zip(ft.rewind.params.tensors()).zip(params.tensors()) {
            let frozen = matches!(owner, Owner::Element(id) if masks.is_pruned(*id));
            let same = before.data().iter().zip(after.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert_eq!(same, frozen, "{owner:?}");
        }
    }
    assert!(rt.warnings.is_empty());
}

fn cfg_slots(p: &EncoderParams) -> Vec<Owner> {
    p.slots().into_iter().map(|s| s.owner).collect()
}

#[test]
fn fully_pruned_layer_warns_but_trains() {
    let corpus = separable_corpus(40, 8);
    let cfg = toy_model();
    let init = EncoderParams::init(&cfg, 0).unwrap();
    let rewind = Checkpoint { step: 0, params: init, masks: MaskSet::ones(&cfg), optimizer: None, dev_metric: None };
    let mut masks = MaskSet::ones(&cfg);
    for id in ElementId::all(&cfg).into_iter().filter(|id| id.layer == 1) {
        masks.prune(id).unwrap();
    }
    let tc = TrainConfig { max_epochs: 1, ..fast_train() };
    let rt = rewind_and_retrain(&rewind, &masks, &corpus, &tc).unwrap();
    assert_eq!(rt.warnings.len(), 1);

    let mut fractional = MaskSet::ones(&cfg);
    fractional.set(ElementId::ffn(0), 0.5).unwrap();
    assert!(matches!(rewind_and_retrain(&rewind, &fractional, &corpus, &tc), Err(Error::Contract(_))));
}

#[test]
fn divergence_aborts_with_non_finite_error() {
    let corpus = separable_corpus(40, 9);
    let cfg = toy_model();
    let tc = TrainConfig { learning_rate: 1e200, max_epochs: 3, ..fast_train() };
    let err = finetune(EncoderParams::init(&cfg, 0).unwrap(), &MaskSet::ones(&cfg), &corpus, &tc).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err:?}");
}

#[test]
fn checkpoints_round_trip_through_files() {
    let spec = SyntheticTaskSpec { examples_per_domain: 30, ..Default::default() };
    let corpus = generate(&spec).unwrap();
    let cfg = ModelConfig { layers: 1, heads: 2, d_model: 8, d_head: 4, d_inner: 8, max_len: 16, ..Default::default() };
    let tc = TrainConfig { max_epochs: 1, ..Default::default() };
    let out = finetune(EncoderParams::init(&cfg, 0).unwrap(), &MaskSet::ones(&cfg), &corpus, &tc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    out.best.save(&path).unwrap();
    let back = Checkpoint::load_for(&path, &cfg).unwrap();
    assert_eq!(back.checksum(), out.best.checksum());
    assert_eq!(back, out.best);
    let other = ModelConfig { d_inner: 12, ..cfg };
    assert!(matches!(Checkpoint::load_for(&path, &other), Err(Error::Shape { .. })));
}
