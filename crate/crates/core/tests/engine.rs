mod common;

use std::collections::{BTreeMap, HashSet};

use common::fixtures::{flat_grads, flat_sample, nullification_residuals, step_inputs, tiny_config, weights};
use common::simplex_row;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use souf::backbone::{VisionTransformer, CLASSIFIER_PREFIX};
use souf::checkpoint::{classifier_digest, Checkpoint};
use souf::config::RunConfig;
use souf::data::{generate_synthetic_shift, DatasetSplit, Domain, Sample};
use souf::engine::{adapt_target, build_reliable_set, pretrain_source, step_gradients, PredictionStore, Provenance, PseudoLabel};
use souf::experiment::Toggles;
use souf::losses::{LossWeights, ProbMatrix};
use souf::{SplitF64, Tensor};

// ---- prediction store ----

#[test]
fn store_rows_stay_on_the_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c = rng.random_range(2..=6);
        let n = rng.random_range(1..=8);
        let alpha = rng.random_range(0.0..1.0);
        let mut store = PredictionStore::<f64>::new(0..n as u64, c, alpha);
        for _ in 0..rng.random_range(1..=25) {
            let ids: Vec<u64> = (0..n as u64).filter(|_| rng.random_bool(0.6)).collect();
            // one-hot and near-degenerate rows included
            let rows: Vec<f64> = ids
                .iter()
                .flat_map(|_| {
                    if rng.random_bool(0.2) {
                        let mut r = vec![0.0; c];
                        r[rng.random_range(0..c)] = 1.0;
                        r
                    } else {
                        simplex_row(&mut rng, c, 0.0)
                    }
                })
                .collect();
            store.update(&ids, &ProbMatrix::new(ids.len(), c, rows).unwrap()).unwrap();
            store.finish_epoch();
        }
        for id in 0..n as u64 {
            let row = store.get(id).unwrap();
            assert!(row.iter().all(|v| *v >= 0.0));
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    assert!(worst < 1e-12, "row sum drifted by {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn constant_input_follows_the_geometric_recurrence(
        alpha in 0.0f64..1.0,
        steps in 1usize..=30,
        raw in prop::collection::vec(0.01f64..1.0, 2..=6),
    ) {
        let c = raw.len();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let mut store = PredictionStore::<f64>::new([7u64], c, alpha);
        for _ in 0..steps {
            store.update(&[7], &ProbMatrix::new(1, c, p.clone()).unwrap()).unwrap();
        }
        let decay = alpha.powi(steps as i32);
        for (got, pk) in store.get(7).unwrap().iter().zip(&p) {
            let want = (1.0 - decay) * pk + decay / c as f64;
            prop_assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn reliable_set_cardinality_law(
        classes in 2usize..=5,
        k in 0usize..=4,
        shots in 0usize..=2,
        pool in prop::collection::vec((0usize..5, 0u8..4), 0..40),
    ) {
        // pseudo-classes drawn from a possibly smaller range leave some classes empty
        let unlabeled: Vec<Sample<f64>> = (0..pool.len() as u64).map(|id| flat_sample(100 + id, None)).collect();
        let labeled: Vec<Sample<f64>> = (0..classes * shots).map(|i| flat_sample(i as u64, Some(i % classes))).collect();
        let pseudo: BTreeMap<u64, PseudoLabel> = pool
            .iter()
            .enumerate()
            .map(|(i, (c, e))| (100 + i as u64, PseudoLabel { class: c % classes, entropy: *e as f64 * 0.25 }))
            .collect();
        let set = build_reliable_set(&pseudo, &unlabeled, &labeled, k).unwrap();
        let mut sizes = vec![0usize; classes];
        for pl in pseudo.values() {
            sizes[pl.class] += 1;
        }
        let want = labeled.len() + sizes.iter().map(|s| (*s).min(k)).sum::<usize>();
        prop_assert_eq!(set.len(), want);
        let ids: HashSet<u64> = set.entries.iter().map(|e| e.sample.id).collect();
        prop_assert_eq!(ids.len(), set.len());
        let chosen: HashSet<u64> = set.entries.iter().filter(|e| e.provenance == Provenance::HighConfidence).map(|e| e.sample.id).collect();
        for e in set.entries.iter().filter(|e| e.provenance == Provenance::HighConfidence) {
            prop_assert_eq!(e.label, pseudo[&e.sample.id].class);
            let h = pseudo[&e.sample.id].entropy;
            // nothing left out of the same class is strictly more confident
            for (id, pl) in &pseudo {
                if pl.class == e.label && !chosen.contains(id) {
                    prop_assert!(pl.entropy >= h);
                }
            }
        }
        prop_assert_eq!(set.entries.iter().filter(|e| e.provenance == Provenance::GroundTruth).count(), labeled.len());
    }
}

#[test]
fn reliable_set_full_and_degenerate_counts() {
    let labeled: Vec<Sample<f64>> = (0..4).map(|c| flat_sample(c, Some(c as usize))).collect();
    let unlabeled: Vec<Sample<f64>> = (0..40).map(|i| flat_sample(100 + i, None)).collect();
    let full: BTreeMap<u64, PseudoLabel> = (0..40).map(|i| (100 + i, PseudoLabel { class: (i % 4) as usize, entropy: i as f64 })).collect();
    assert_eq!(build_reliable_set(&full, &unlabeled, &labeled, 2).unwrap().len(), 12);
    assert_eq!(build_reliable_set(&full, &unlabeled, &labeled, 0).unwrap().len(), 4);
    let missing: BTreeMap<u64, PseudoLabel> = (0..40).map(|i| (100 + i, PseudoLabel { class: (i % 3) as usize, entropy: 0.1 })).collect();
    assert_eq!(build_reliable_set(&missing, &unlabeled, &labeled, 2).unwrap().len(), 4 + 3 * 2);
}

// ---- pretraining ----

/// Two classes that differ only in mean brightness, with per-pixel noise.
fn separable_source(n: usize, seed: u64) -> SplitF64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = (0..n)
        .map(|i| {
            let label = i % 2;
            let base = if label == 0 { 0.25 } else { 0.75 };
            let pixels = (0..192).map(|_| (base + rng.random_range(-0.15..0.15f64)).clamp(0.0, 1.0)).collect();
            Sample { id: i as u64, image: Tensor::from_vec(&[3, 8, 8], pixels).unwrap(), label: Some(label), domain: Domain::Source }
        })
        .collect();
    DatasetSplit { source, target_labeled: vec![], target_unlabeled: vec![], unlabeled_truth: vec![], target_holdout: vec![], num_classes: 2 }
}

fn separable_config(epochs: usize) -> RunConfig {
    let mut cfg = tiny_config(3);
    cfg.data.num_classes = 2;
    cfg.train.epochs_pretrain = epochs;
    cfg
}

#[test]
fn pretraining_separates_an_easy_source() {
    let split = separable_source(100, 1);
    let out = pretrain_source(&split, &separable_config(20)).unwrap();
    assert!(out.source_val_acc >= 0.95, "source validation accuracy {}", out.source_val_acc);
    assert_eq!(out.train_loss.len(), 20);
    assert!(out.train_loss[19] < out.train_loss[0]);
    assert_eq!(out.checkpoint.source_val_acc, Some(out.source_val_acc));
}

#[test]
fn zero_epochs_returns_the_initialisation() {
    let split = separable_source(20, 2);
    let cfg = separable_config(0);
    let out = pretrain_source(&split, &cfg).unwrap();
    let init = VisionTransformer::<f64>::new(cfg.encoder(), cfg.train.seed).unwrap();
    let trained = out.checkpoint.to_model().unwrap();
    for ((_, a), (_, b)) in init.params().iter().zip(trained.params().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn pretraining_is_deterministic() {
    let split = separable_source(40, 3);
    let a = pretrain_source(&split, &separable_config(2)).unwrap();
    let b = pretrain_source(&split, &separable_config(2)).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.train_loss, b.train_loss);
    let mut other = separable_config(2);
    other.train.seed = 4;
    assert_ne!(pretrain_source(&split, &other).unwrap().checkpoint, a.checkpoint);
    let dir = tempfile::tempdir().unwrap();
    a.checkpoint.save(&dir.path().join("s.ckpt")).unwrap();
    assert_eq!(Checkpoint::<f64>::load(&dir.path().join("s.ckpt")).unwrap().source_val_acc, Some(a.source_val_acc));
}

#[test]
fn pretraining_rejects_an_empty_source() {
    let mut split = separable_source(4, 0);
    split.source.clear();
    assert!(matches!(pretrain_source(&split, &separable_config(1)), Err(souf::Error::Config(_))));
}

// ---- adaptation ----

fn tiny_source(seed: u64) -> (SplitF64, Checkpoint<f64>, RunConfig) {
    let cfg = tiny_config(seed);
    let split: SplitF64 = generate_synthetic_shift(&cfg.data).unwrap();
    let ckpt = pretrain_source(&split, &cfg).unwrap().checkpoint;
    (split, ckpt, cfg)
}

#[test]
fn classifier_is_bit_identical_across_adaptation() {
    let (split, ckpt, cfg) = tiny_source(0);
    let source_digest = classifier_digest(&ckpt.to_model().unwrap());
    let out = adapt_target(&split, &ckpt, &cfg, |_| {}).unwrap();
    assert_eq!(out.classifier_digest_before, source_digest);
    assert_eq!(out.classifier_digest_after, source_digest);
    let adapted = Checkpoint::from_model(&out.model, None);
    assert_eq!(adapted.classifier.iter().map(|p| &p.value).collect::<Vec<_>>(), ckpt.classifier.iter().map(|p| &p.value).collect::<Vec<_>>());
    assert_ne!(adapted.encoder, ckpt.encoder);
}

#[test]
fn adaptation_is_deterministic() {
    let (split, ckpt, cfg) = tiny_source(1);
    let a = adapt_target(&split, &ckpt, &cfg, |_| {}).unwrap();
    let b = adapt_target(&split, &ckpt, &cfg, |_| {}).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(Checkpoint::from_model(&a.model, None), Checkpoint::from_model(&b.model, None));
    assert_eq!(a.metrics.len(), cfg.train.epochs_adapt);
    for m in &a.metrics {
        for v in [m.loss_base, m.loss_pwc, m.loss_rmc, m.loss_pr, m.loss_all, m.target_acc] {
            assert!(v.is_finite());
        }
    }
}

#[test]
fn zero_weights_reproduce_the_base_trajectory() {
    let (split, ckpt, cfg) = tiny_source(2);
    let zeroed = Toggles::NONE.apply(&cfg);
    let mut base = cfg.clone();
    base.loss = LossWeights { lambda_pwc: 0.0, lambda_rmc: 0.0, lambda_pr: 0.0, ..cfg.loss };
    let a = adapt_target(&split, &ckpt, &zeroed, |_| {}).unwrap();
    let b = adapt_target(&split, &ckpt, &base, |_| {}).unwrap();
    assert_eq!(a.metrics, b.metrics);
    for m in &a.metrics {
        assert_eq!((m.loss_pwc, m.loss_rmc, m.loss_pr), (0.0, 0.0, 0.0));
        assert_eq!(m.loss_all, m.loss_base);
    }
}

#[test]
fn epoch_callback_sees_every_record_in_order() {
    let (split, ckpt, cfg) = tiny_source(0);
    let mut seen = Vec::new();
    let out = adapt_target(&split, &ckpt, &cfg, |m| seen.push(m.clone())).unwrap();
    assert_eq!(seen, out.metrics);
    assert_eq!(seen.iter().map(|m| m.epoch).collect::<Vec<_>>(), vec![1, 2]);
}

// ---- gradient nullification ----

#[test]
fn zeroed_components_contribute_no_gradient() {
    let (split, ckpt, cfg) = tiny_source(0);
    let mut model = ckpt.to_model().unwrap();
    model.freeze_classifier();
    let inputs = step_inputs(&split, &model, &cfg);
    let mut without_mix = inputs.clone();
    without_mix.mixed = None;

    let none = step_gradients(&model, &inputs, &weights(0.0, 0.0, 0.0)).unwrap();
    // the mixed batch is ignored entirely when its weight is zero
    assert_eq!(flat_grads(&none), flat_grads(&step_gradients(&model, &without_mix, &weights(0.0, 0.0, 0.0)).unwrap()));
    assert_eq!((none.parts.pwc, none.parts.rmc, none.parts.pr), (0.0, 0.0, 0.0));
    assert_eq!(none.total, none.parts.base);

    for zeroed in [weights(0.0, 0.1, 3.0), weights(0.1, 0.0, 3.0), weights(0.1, 0.1, 0.0)] {
        let parts = step_gradients(&model, &inputs, &zeroed).unwrap().parts;
        let logged = [(zeroed.lambda_pwc, parts.pwc), (zeroed.lambda_rmc, parts.rmc), (zeroed.lambda_pr, parts.pr)];
        assert!(logged.iter().all(|(lam, v)| *lam > 0.0 || *v == 0.0), "{parts:?}");
    }
    for (name, residual, removed) in nullification_residuals(&model, &inputs) {
        assert!(residual <= 1e-9, "{name}: residual {residual:e}");
        assert!(removed > 1e-9, "{name} had no gradient to remove");
    }
}

#[test]
fn frozen_classifier_receives_no_gradient() {
    let (split, ckpt, cfg) = tiny_source(0);
    let mut model = ckpt.to_model().unwrap();
    model.freeze_classifier();
    let inputs = step_inputs(&split, &model, &cfg);
    let out = step_gradients(&model, &inputs, &weights(0.1, 0.1, 3.0)).unwrap();
    let mut checked = 0;
    for (k, (_, p)) in model.params().iter().enumerate() {
        if p.name.starts_with(CLASSIFIER_PREFIX) {
            assert!(out.grads[k].as_ref().map_or(true, |t| t.data().iter().all(|v| *v == 0.0)), "{}", p.name);
            checked += 1;
        }
    }
    assert_eq!(checked, model.classifier_ids().len());
}
