//! Small configurations and step inputs shared by the engine and acceptance tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use souf::backbone::VisionTransformer;
use souf::batching::{make_batches, BatchOptions};
use souf::config::{ModelConfig, RunConfig};
use souf::data::{Domain, Sample, ShiftConfig, ShiftKind};
use souf::engine::{assemble_mixed_batch, build_reliable_set, pseudo_label, LambdaSampler, MixedInputs, PredictionStore, StepInputs, StepOutput};
use souf::losses::{LossWeights, ProbMatrix};
use souf::{SplitF64, Tensor};

use super::simplex_row;

/// Three classes of 8x8 images and a one-block encoder; a full adaptation takes milliseconds.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = ShiftConfig {
        num_classes: 3,
        image_size: 8,
        patch_size: 4,
        shots: 1,
        n_source: 45,
        n_unlabeled: 30,
        n_holdout: 0,
        shift_kind: ShiftKind::ColorInvert,
        seed: 21,
        ..Default::default()
    };
    cfg.model = ModelConfig { embed_dim: 16, depth: 1, heads: 2, mlp_dim: 32 };
    cfg.train.seed = seed;
    cfg.train.epochs_pretrain = 3;
    cfg.train.epochs_adapt = 2;
    cfg.train.batch_size = 8;
    cfg.train.labeled_batch_size = 3;
    cfg.train.mix_batch_size = 4;
    cfg.train.pretrain_batch_size = 8;
    cfg
}

pub fn flat_sample(id: u64, label: Option<usize>) -> Sample<f64> {
    Sample { id, image: Tensor::full(&[3, 8, 8], 0.5), label, domain: Domain::Target }
}

/// One batch with every loss component live: non-uniform store rows and a mixed reliable batch.
pub fn step_inputs(split: &SplitF64, model: &VisionTransformer<f64>, cfg: &RunConfig) -> StepInputs<f64> {
    let opts = BatchOptions { batch_size: cfg.train.batch_size, labeled_batch_size: cfg.train.labeled_batch_size, augment: cfg.train.augment() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (labeled, unlabeled) = make_batches(split, &opts, &mut rng).unwrap().next().unwrap();
    let pseudo = pseudo_label(model, &split.target_unlabeled).unwrap();
    let ids = unlabeled.ids();
    let mut store = PredictionStore::<f64>::new(ids.iter().copied(), split.num_classes, 0.7);
    let rows: Vec<f64> = ids.iter().flat_map(|_| simplex_row(&mut rng, split.num_classes, 0.05)).collect();
    store.update(&ids, &ProbMatrix::new(ids.len(), split.num_classes, rows).unwrap()).unwrap();
    let reliable = build_reliable_set(&pseudo, &split.target_unlabeled, &split.target_labeled, 2).unwrap();
    let batch = assemble_mixed_batch(&reliable, 4, 4, LambdaSampler::Beta { beta: 1.0, gamma: 1.0 }, &mut rng).unwrap();
    StepInputs {
        pseudo: ids.iter().map(|id| pseudo[id].class).collect(),
        ema: store.rows(&ids).unwrap(),
        mixed: Some(MixedInputs { batch, components: reliable.images().unwrap(), labels: reliable.labels() }),
        labeled,
        unlabeled,
    }
}

pub fn flat_grads(out: &StepOutput<f64>) -> Vec<f64> {
    out.grads.iter().flat_map(|g| g.as_ref().map(|t| t.data().to_vec()).unwrap_or_default()).collect()
}

pub fn weights(pwc: f64, rmc: f64, pr: f64) -> LossWeights {
    LossWeights { lambda_pwc: pwc, lambda_rmc: rmc, lambda_pr: pr, ..LossWeights::default() }
}

/// Largest deviation of `G(all) - G(all without X)` from `lambda_X * (G(X alone) - G(none))`,
/// relative to the largest gradient entry, and the norm of the removed contribution.
pub fn nullification_residuals(model: &VisionTransformer<f64>, inputs: &StepInputs<f64>) -> Vec<(&'static str, f64, f64)> {
    use souf::engine::step_gradients;
    let g_all = flat_grads(&step_gradients(model, inputs, &weights(0.1, 0.1, 3.0)).unwrap());
    let g_none = flat_grads(&step_gradients(model, inputs, &weights(0.0, 0.0, 0.0)).unwrap());
    let scale = g_all.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    [
        ("pwc", 0.1, weights(0.0, 0.1, 3.0), weights(1.0, 0.0, 0.0)),
        ("rmc", 0.1, weights(0.1, 0.0, 3.0), weights(0.0, 1.0, 0.0)),
        ("pr", 3.0, weights(0.1, 0.1, 0.0), weights(0.0, 0.0, 1.0)),
    ]
    .into_iter()
    .map(|(name, lam, zeroed, unit)| {
        let g_zeroed = flat_grads(&step_gradients(model, inputs, &zeroed).unwrap());
        let g_unit = flat_grads(&step_gradients(model, inputs, &unit).unwrap());
        let mut worst: f64 = 0.0;
        let mut norm = 0.0;
        for k in 0..g_all.len() {
            let contribution = g_all[k] - g_zeroed[k];
            worst = worst.max((contribution - lam * (g_unit[k] - g_none[k])).abs() / scale);
            norm += contribution * contribution;
        }
        (name, worst, f64::sqrt(norm))
    })
    .collect()
}
