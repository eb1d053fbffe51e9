use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use souf::backbone::{lambda_hat, mix_patches, AttentionSummary, EncoderConfig, MixSpec, VisionTransformer};
use souf::checkpoint::{classifier_digest, Checkpoint};
use souf::autograd::Graph;
use souf::optim::Sgd;
use souf::Tensor;

fn tiny(classes: usize) -> EncoderConfig {
    EncoderConfig { image_size: 8, channels: 3, patch_size: 4, embed_dim: 16, depth: 2, heads: 2, mlp_dim: 32, num_classes: classes }
}

fn images(seed: u64, b: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[b, 3, 8, 8], (0..b * 192).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn spec(lambdas: Vec<f64>) -> MixSpec<f64> {
    MixSpec { i: 0, j: 1, lambdas, beta_params: (1.0, 1.0) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn lambda_hat_is_bounded_and_monotone(
        lam in prop::collection::vec(0.0f64..=1.0, 2..16),
        ai in prop::collection::vec(0.0f64..2.0, 16),
        aj in prop::collection::vec(0.0f64..2.0, 16),
        which in 0usize..16,
        bump in 0.0f64..=1.0,
    ) {
        let m = lam.len();
        let mut ai = ai[..m].to_vec();
        let mut aj = aj[..m].to_vec();
        ai[0] += 1e-3;
        aj[0] += 1e-3;
        let (ai, aj) = (AttentionSummary::new(ai).unwrap(), AttentionSummary::new(aj).unwrap());
        let v = lambda_hat(&lam, &ai, &aj).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let n = which % m;
        let mut raised = lam.clone();
        raised[n] = (raised[n] + bump).min(1.0);
        let w = lambda_hat(&raised, &ai, &aj).unwrap();
        prop_assert!(w >= v - 1e-12, "{w} < {v}");
    }

    /// Swapping the images, or complementing the coefficients, gives the other half of `x_i + x_j`.
    ///
    /// Exact on pixel levels `k / 256` with coefficients on a 1/64 grid, where
    /// every product and sum is representable.
    #[test]
    fn complementary_mixes_reconstruct_the_sum(seed in any::<u64>(), steps in prop::collection::vec(0u32..=64, 4)) {
        let x = images(seed, 2).map(|v| (v * 256.0).floor() / 256.0);
        let a = Tensor::from_vec(&[3, 8, 8], x.data()[..192].to_vec()).unwrap();
        let b = Tensor::from_vec(&[3, 8, 8], x.data()[192..].to_vec()).unwrap();
        let lam: Vec<f64> = steps.iter().map(|s| *s as f64 / 64.0).collect();
        let comp: Vec<f64> = lam.iter().map(|l| 1.0 - l).collect();
        let ab = mix_patches(&a, &b, &spec(lam.clone()), 4).unwrap();
        let ba = mix_patches(&b, &a, &spec(lam), 4).unwrap();
        let ab_comp = mix_patches(&a, &b, &spec(comp), 4).unwrap();
        for (k, (p, q)) in a.data().iter().zip(b.data()).enumerate() {
            prop_assert_eq!(ab.data()[k] + ba.data()[k], p + q);
            prop_assert_eq!(ab.data()[k] + ab_comp.data()[k], p + q);
        }
        prop_assert!(ab.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn complementary_mixes_agree_to_rounding(seed in any::<u64>(), lam in prop::collection::vec(0.0f64..=1.0, 4)) {
        let x = images(seed, 2);
        let a = Tensor::from_vec(&[3, 8, 8], x.data()[..192].to_vec()).unwrap();
        let b = Tensor::from_vec(&[3, 8, 8], x.data()[192..].to_vec()).unwrap();
        let ab = mix_patches(&a, &b, &spec(lam.clone()), 4).unwrap();
        let ba = mix_patches(&b, &a, &spec(lam), 4).unwrap();
        for (k, (p, q)) in a.data().iter().zip(b.data()).enumerate() {
            prop_assert!((ab.data()[k] + ba.data()[k] - (p + q)).abs() <= 8.0 * f64::EPSILON);
        }
    }

    #[test]
    fn mixed_patch_is_the_convex_combination(seed in any::<u64>(), lam in prop::collection::vec(0.0f64..=1.0, 4)) {
        let x = images(seed, 2);
        let a = Tensor::from_vec(&[3, 8, 8], x.data()[..192].to_vec()).unwrap();
        let b = Tensor::from_vec(&[3, 8, 8], x.data()[192..].to_vec()).unwrap();
        let out = mix_patches(&a, &b, &spec(lam.clone()), 4).unwrap();
        for ch in 0..3 {
            for y in 0..8 {
                for xx in 0..8 {
                    let n = (y / 4) * 2 + xx / 4;
                    let idx = ch * 64 + y * 8 + xx;
                    prop_assert_eq!(out.data()[idx], lam[n] * a.data()[idx] + (1.0 - lam[n]) * b.data()[idx]);
                }
            }
        }
    }
}

#[test]
fn lambda_hat_hand_cases() {
    let ai = AttentionSummary::new(vec![2.0f64, 1.0]).unwrap();
    let aj = AttentionSummary::new(vec![3.0, 1.0]).unwrap();
    assert!((lambda_hat(&[1.0, 0.0], &ai, &aj).unwrap() - 2.0 / 3.0).abs() < 1e-9);
    assert_eq!(lambda_hat(&[1.0, 1.0], &ai, &aj).unwrap(), 1.0);
    assert_eq!(lambda_hat(&[0.0, 0.0], &ai, &aj).unwrap(), 0.0);
}

#[test]
fn every_emitted_distribution_is_on_the_simplex() {
    for seed in 0..5 {
        let vit = VisionTransformer::<f64>::new(tiny(4), seed).unwrap();
        for o in vit.infer(&images(100 + seed, 7), 3).unwrap() {
            assert!(o.probs.iter().all(|p| *p >= 0.0));
            assert!((o.probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(o.attention.scores.iter().all(|a| *a >= 0.0));
            assert!(o.attention.scores.iter().sum::<f64>() > 0.0);
            assert_eq!(o.features.len(), 16);
        }
    }
}

#[test]
fn chunking_does_not_change_outputs() {
    let vit = VisionTransformer::<f64>::new(tiny(3), 4).unwrap();
    let x = images(8, 5);
    let whole = vit.infer(&x, 5).unwrap();
    let parts = vit.infer(&x, 2).unwrap();
    for (a, b) in whole.iter().zip(&parts) {
        for (u, v) in a.probs.iter().zip(&b.probs) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn frozen_head_survives_optimizer_steps() {
    let mut vit = VisionTransformer::<f64>::new(tiny(3), 6).unwrap();
    vit.freeze_classifier();
    let before = classifier_digest(&vit);
    let head: Vec<Tensor<f64>> = vit.classifier_ids().iter().map(|id| vit.params().get(*id).value.clone()).collect();
    let encoder_before = vit.params().iter().next().unwrap().1.value.clone();
    let mut sgd = Sgd::new(0.9);
    for step in 0..10 {
        let x = images(step, 4);
        let grads = {
            let mut g = Graph::new(vit.params());
            let fwd = vit.forward(&mut g, &x).unwrap();
            g.backward(&[(fwd.probs, Tensor::full(&[4, 3], 0.3))]).into_params()
        };
        sgd.step(vit.params_mut(), &grads, |_| 0.05);
    }
    for (id, t) in vit.classifier_ids().iter().zip(&head) {
        assert_eq!(vit.params().get(*id).value.max_abs_diff(t), 0.0);
    }
    assert_eq!(classifier_digest(&vit), before);
    assert!(vit.params().iter().next().unwrap().1.value.max_abs_diff(&encoder_before) > 0.0);
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let vit = VisionTransformer::<f32>::new(EncoderConfig { num_classes: 4, ..tiny(4) }, 9).unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_model(&vit, Some(0.8125)).save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(loaded.source_val_acc, Some(0.8125));
    let model = loaded.to_model().unwrap();
    let probe = images(3, 6).map(|v| v as f32);
    let a = vit.infer(&probe, 6).unwrap();
    let b = model.infer(&probe, 6).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.logits, y.logits);
        assert_eq!(x.attention.scores, y.attention.scores);
    }
    assert!(Checkpoint::<f32>::load(&dir.path().join("missing.ckpt")).is_err());
    std::fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    assert!(matches!(Checkpoint::<f32>::load(&dir.path().join("bad.ckpt")), Err(souf::Error::Checkpoint(_))));
}
