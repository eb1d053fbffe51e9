//! Source pretraining and source-free target adaptation.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{lambda_hat, mix_patches, MixSpec, VisionTransformer};
use crate::batching::{make_batches, BatchOptions, LabeledBatch, UnlabeledBatch};
use crate::checkpoint::{classifier_digest, Checkpoint};
use crate::config::{EvalSplit, OptimizerKind, RunConfig};
use crate::data::{derive_rng, stack_images, DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::eval::{predict, AccuracyReport};
use crate::losses::{
    argmax, base_loss, pr_loss, pwc_loss, rmc_loss, total_loss, CategoryAssignment, LabelSource, LossParts, LossWeights,
    MixPairing, ProbMatrix,
};
use crate::optim::{Adam, Sgd};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const PRETRAIN_STREAM: u64 = 10;
const VAL_STREAM: u64 = 11;
const BATCH_STREAM: u64 = 12;
const MIX_STREAM: u64 = 13;
const EVAL_CHUNK: usize = 100;

/// Moving-average predictions of the unlabelled target samples, keyed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionStore<T> {
    ema: BTreeMap<u64, Vec<T>>,
    alpha: T,
    epoch: usize,
    num_classes: usize,
}

impl<T: Scalar> PredictionStore<T> {
    /// Every row starts at the uniform distribution.
    pub fn new(ids: impl IntoIterator<Item = u64>, num_classes: usize, alpha: f64) -> Self {
        let u = T::one() / T::from_usize(num_classes).unwrap();
        Self {
            ema: ids.into_iter().map(|id| (id, vec![u; num_classes])).collect(),
            alpha: T::from_f64_lossy(alpha),
            epoch: 0,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.ema.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ema.is_empty()
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn get(&self, id: u64) -> Result<&[T]> {
        self.ema.get(&id).map(Vec::as_slice).ok_or(Error::UnknownId(id))
    }

    pub fn rows(&self, ids: &[u64]) -> Result<ProbMatrix<T>> {
        let mut values = Vec::with_capacity(ids.len() * self.num_classes);
        for id in ids {
            values.extend_from_slice(self.get(*id)?);
        }
        ProbMatrix::new_unchecked(ids.len(), self.num_classes, values)
    }

    /// `ema_i <- alpha * ema_i + (1 - alpha) * p_i`; nothing changes if any id is unknown.
    pub fn update(&mut self, ids: &[u64], probs: &ProbMatrix<T>) -> Result<()> {
        if ids.len() != probs.rows() || probs.cols() != self.num_classes {
            return Err(Error::Shape("prediction store update: shape mismatch".into()));
        }
        if let Some(id) = ids.iter().find(|id| !self.ema.contains_key(id)) {
            return Err(Error::UnknownId(*id));
        }
        let a = self.alpha;
        for (r, id) in ids.iter().enumerate() {
            let row = self.ema.get_mut(id).expect("checked above");
            for (e, p) in row.iter_mut().zip(probs.row(r)) {
                *e = a * *e + (T::one() - a) * *p;
            }
        }
        Ok(())
    }

    pub fn finish_epoch(&mut self) {
        self.epoch += 1;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub class: usize,
    pub entropy: f64,
}

/// Shannon entropy in nats; `0 ln 0 = 0`.
pub fn entropy<T: Scalar>(p: &[T]) -> f64 {
    -p.iter().map(|v| v.as_f64()).filter(|v| *v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn pseudo_labels_from_probs<T: Scalar>(ids: &[u64], probs: &[Vec<T>]) -> BTreeMap<u64, PseudoLabel> {
    ids.iter().zip(probs).map(|(id, p)| (*id, PseudoLabel { class: argmax(p), entropy: entropy(p) })).collect()
}

/// Argmax class and prediction entropy of every sample, from un-augmented images.
pub fn pseudo_label<T: Scalar>(model: &VisionTransformer<T>, samples: &[Sample<T>]) -> Result<BTreeMap<u64, PseudoLabel>> {
    let probs = predict(model, samples, EVAL_CHUNK)?;
    let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
    Ok(pseudo_labels_from_probs(&ids, &probs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    GroundTruth,
    HighConfidence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliableEntry<T> {
    pub sample: Sample<T>,
    pub label: usize,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliableSet<T> {
    pub entries: Vec<ReliableEntry<T>>,
    pub k: usize,
}

impl<T: Scalar> ReliableSet<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn images(&self) -> Result<Tensor<T>> {
        stack_images(self.entries.iter().map(|e| &e.sample.image))
    }
}

/// Labelled target samples plus the `k` lowest-entropy unlabelled samples of each pseudo-class.
///
/// Entropy ties are broken by sample id. A class with fewer than `k`
/// candidates contributes all of them.
pub fn build_reliable_set<T: Scalar>(
    pseudo: &BTreeMap<u64, PseudoLabel>,
    unlabeled: &[Sample<T>],
    labeled: &[Sample<T>],
    k: usize,
) -> Result<ReliableSet<T>> {
    let by_id: BTreeMap<u64, &Sample<T>> = unlabeled.iter().map(|s| (s.id, s)).collect();
    if let Some(id) = pseudo.keys().find(|id| !by_id.contains_key(id)) {
        return Err(Error::UnknownId(*id));
    }
    let mut entries: Vec<ReliableEntry<T>> = Vec::new();
    let mut seen = HashSet::new();
    for s in labeled {
        let label = s.label.ok_or_else(|| Error::Validation(format!("labelled sample {} has no label", s.id)))?;
        if seen.insert(s.id) {
            entries.push(ReliableEntry { sample: s.clone(), label, provenance: Provenance::GroundTruth });
        }
    }
    let mut pools: BTreeMap<usize, Vec<(f64, u64)>> = BTreeMap::new();
    for (id, pl) in pseudo {
        if !seen.contains(id) {
            pools.entry(pl.class).or_default().push((pl.entropy, *id));
        }
    }
    for (class, mut pool) in pools {
        pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, id) in pool.into_iter().take(k) {
            seen.insert(id);
            entries.push(ReliableEntry { sample: by_id[&id].clone(), label: class, provenance: Provenance::HighConfidence });
        }
    }
    Ok(ReliableSet { entries, k })
}

/// How the per-patch mixing coefficients are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaSampler {
    Beta { beta: f64, gamma: f64 },
    /// Every coefficient takes this value (the large-β, γ limit at 0.5).
    Constant(f64),
}

#[derive(Clone, Debug)]
pub struct MixedBatch<T> {
    /// `[B, C, H, W]` mixed images.
    pub images: Tensor<T>,
    pub pairings: Vec<MixPairing>,
    pub specs: Vec<MixSpec<T>>,
}

/// Draws `batch_size` ordered pairs of distinct reliable entries and mixes them patch-wise.
pub fn assemble_mixed_batch<T: Scalar, R: Rng + ?Sized>(
    reliable: &ReliableSet<T>,
    batch_size: usize,
    patch_size: usize,
    sampler: LambdaSampler,
    rng: &mut R,
) -> Result<MixedBatch<T>> {
    let n = reliable.len();
    if n < 2 {
        return Err(Error::Validation(format!("mixing needs at least two reliable samples, found {n}")));
    }
    let first = &reliable.entries[0].sample.image;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Shape(format!("{h}x{w} image not divisible into {patch_size}px patches")));
    }
    let m = (h / patch_size) * (w / patch_size);
    let (beta_params, beta) = match sampler {
        LambdaSampler::Beta { beta, gamma } => {
            let d = Beta::new(beta, gamma).map_err(|e| Error::Config(format!("mixing distribution: {e}")))?;
            ((beta, gamma), Some(d))
        }
        LambdaSampler::Constant(v) => {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("mixing coefficient {v} outside [0, 1]")));
            }
            ((f64::INFINITY, f64::INFINITY), None)
        }
    };
    let mut pairings = Vec::with_capacity(batch_size);
    let mut specs = Vec::with_capacity(batch_size);
    let mut mixed = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let lambdas: Vec<T> = (0..m)
            .map(|_| match (&beta, sampler) {
                (Some(d), _) => T::from_f64_lossy(d.sample(rng)),
                (None, LambdaSampler::Constant(v)) => T::from_f64_lossy(v),
                (None, _) => unreachable!(),
            })
            .collect();
        let spec = MixSpec { i, j, lambdas, beta_params };
        mixed.push(mix_patches(&reliable.entries[i].sample.image, &reliable.entries[j].sample.image, &spec, patch_size)?);
        pairings.push(MixPairing { i, j });
        specs.push(spec);
    }
    Ok(MixedBatch { images: stack_images(&mixed)?, pairings, specs })
}

/// Everything one adaptation step consumes.
#[derive(Clone, Debug)]
pub struct StepInputs<T> {
    pub labeled: LabeledBatch<T>,
    pub unlabeled: UnlabeledBatch<T>,
    /// Epoch pseudo-label of each unlabelled row.
    pub pseudo: Vec<usize>,
    /// Moving-average rows of the unlabelled samples, frozen for the step.
    pub ema: ProbMatrix<T>,
    pub mixed: Option<MixedInputs<T>>,
}

#[derive(Clone, Debug)]
pub struct MixedInputs<T> {
    pub batch: MixedBatch<T>,
    /// Un-augmented images of the reliable set.
    pub components: Tensor<T>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub parts: LossParts,
    pub total: f64,
    /// Parameter gradients, indexed like the model's parameter store.
    pub grads: Vec<Option<Tensor<T>>>,
}

fn prob_matrix<T: Scalar>(g: &Graph<'_, T>, v: crate::autograd::Var) -> Result<ProbMatrix<T>> {
    let t = g.value(v);
    ProbMatrix::new_unchecked(t.rows(), t.cols(), t.data().to_vec())
}

fn finite<T: Scalar>(component: &'static str, v: T) -> Result<f64> {
    let x = v.as_f64();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { component, value: x })
    }
}

/// Losses and encoder gradients of one adaptation step.
///
/// Components with a zero weight are not evaluated, contribute no gradient and
/// are reported as 0.
pub fn step_gradients<T: Scalar>(model: &VisionTransformer<T>, inputs: &StepInputs<T>, w: &LossWeights) -> Result<StepOutput<T>> {
    let c = model.config().num_classes;
    let b = inputs.unlabeled.pairs.len();
    let mut g = Graph::new(model.params());
    let unl = model.forward(&mut g, &inputs.unlabeled.stacked()?)?;
    let lab = model.forward(&mut g, &inputs.labeled.images)?;
    let p_u = prob_matrix(&g, unl.probs)?;
    let p_l = prob_matrix(&g, lab.probs)?;
    let p_weak = ProbMatrix::new_unchecked(b, c, p_u.values()[..b * c].to_vec())?;

    let mut parts = LossParts::default();
    let mut grad_u = vec![T::zero(); 2 * b * c];

    let base = base_loss(&p_l, &inputs.labeled.labels, &p_weak, &inputs.pseudo)?;
    parts.base = finite("base", base.value)?;
    grad_u[..b * c].copy_from_slice(&base.grad_unlabeled);

    if w.lambda_pwc > 0.0 {
        let cats: Vec<usize> = inputs.pseudo.iter().chain(&inputs.pseudo).copied().collect();
        let cats = CategoryAssignment::new(cats, LabelSource::PseudoLabel, c)?;
        let pwc = pwc_loss(&p_u, &cats, w.tau)?;
        parts.pwc = finite("pwc", pwc.value)?;
        let lam = T::from_f64_lossy(w.lambda_pwc);
        grad_u.iter_mut().zip(&pwc.grad).for_each(|(d, s)| *d += lam * *s);
    }
    if w.lambda_pr > 0.0 {
        let pr = pr_loss(&p_weak, &inputs.ema)?;
        parts.pr = finite("pr", pr.value)?;
        let lam = T::from_f64_lossy(w.lambda_pr);
        grad_u[..b * c].iter_mut().zip(&pr.grad).for_each(|(d, s)| *d += lam * *s);
    }

    let mut seeds = vec![
        (unl.probs, Tensor::from_vec(&[2 * b, c], grad_u)?),
        (lab.probs, Tensor::from_vec(&[p_l.rows(), c], base.grad_labeled)?),
    ];

    if let (true, Some(mx)) = (w.lambda_rmc > 0.0, &inputs.mixed) {
        let comp = model.forward(&mut g, &mx.components)?;
        let mix = model.forward(&mut g, &mx.batch.images)?;
        let attn = model.attention_summaries(&g, &mix);
        let lam_hat = mx
            .batch
            .specs
            .iter()
            .zip(&attn)
            .map(|(spec, a)| lambda_hat(&spec.lambdas, a, a))
            .collect::<Result<Vec<T>>>()?;
        let p_comp = prob_matrix(&g, comp.probs)?;
        let p_mix = prob_matrix(&g, mix.probs)?;
        let rmc = rmc_loss(&p_mix, &p_comp, &mx.batch.pairings, &lam_hat, &mx.labels, w.tau)?;
        parts.rmc = finite("rmc", rmc.value)?;
        let lam = T::from_f64_lossy(w.lambda_rmc);
        let scale = |v: Vec<T>| v.into_iter().map(|x| lam * x).collect::<Vec<T>>();
        seeds.push((mix.probs, Tensor::from_vec(&[p_mix.rows(), c], scale(rmc.grad_mix))?));
        seeds.push((comp.probs, Tensor::from_vec(&[p_comp.rows(), c], scale(rmc.grad_components))?));
    }

    let total = total_loss(&parts, w)?;
    let grads = g.backward(&seeds).into_params();
    Ok(StepOutput { parts, total, grads })
}

/// One line of the adaptation metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_base: f64,
    pub loss_pwc: f64,
    pub loss_rmc: f64,
    pub loss_pr: f64,
    pub loss_all: f64,
    pub target_acc: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub source_val_acc: f64,
    /// Mean training cross-entropy of each epoch.
    pub train_loss: Vec<f64>,
}

fn source_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, VAL_STREAM, 0));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Trains encoder and classifier jointly with cross-entropy on the source split.
pub fn pretrain_source<T: Scalar>(split: &DatasetSplit<T>, config: &RunConfig) -> Result<PretrainOutcome<T>> {
    if split.source.is_empty() {
        return Err(Error::Config("source split is empty".into()));
    }
    let tc = &config.train;
    let seed = tc.seed;
    let mut model = VisionTransformer::<T>::new(config.encoder(), seed)?;
    let (train_idx, val_idx) = source_split(split.source.len(), tc.val_fraction, seed);
    let labels: Vec<usize> = split
        .source
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Validation(format!("source sample {} has no label", s.id))))
        .collect::<Result<_>>()?;
    let (lr_enc, lr_cls) = (tc.pretrain_lr_encoder, tc.pretrain_lr_classifier);
    let lr = |p: &crate::autograd::Param<T>| if p.name.starts_with(crate::backbone::CLASSIFIER_PREFIX) { lr_cls } else { lr_enc };
    let mut sgd = Sgd::new(tc.momentum);
    let mut adam = Adam::default();
    let mut train_loss = Vec::with_capacity(tc.epochs_pretrain);
    let c = config.data.num_classes;
    for epoch in 0..tc.epochs_pretrain {
        let mut order = train_idx.clone();
        order.shuffle(&mut derive_rng(seed, PRETRAIN_STREAM, epoch as u64));
        let mut sum = 0.0;
        for chunk in order.chunks(tc.pretrain_batch_size) {
            let images = stack_images(chunk.iter().map(|&i| &split.source[i].image))?;
            let mut g = Graph::new(model.params());
            let fwd = model.forward(&mut g, &images)?;
            let probs = g.value(fwd.probs);
            let n = T::from_usize(chunk.len()).unwrap();
            let mut loss = 0.0;
            let mut dlogits = probs.data().to_vec();
            for (r, &i) in chunk.iter().enumerate() {
                let y = labels[i];
                loss -= probs.row(r)[y].as_f64().max(1e-12).ln();
                dlogits[r * c + y] -= T::one();
            }
            dlogits.iter_mut().for_each(|v| *v /= n);
            let loss = loss / chunk.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite { component: "source_ce", value: loss });
            }
            sum += loss * chunk.len() as f64;
            let grads = g.backward(&[(fwd.logits, Tensor::from_vec(&[chunk.len(), c], dlogits)?)]).into_params();
            drop(g);
            match tc.pretrain_optimizer {
                OptimizerKind::Sgd => sgd.step(model.params_mut(), &grads, lr),
                OptimizerKind::Adam => adam.step(model.params_mut(), &grads, lr),
            }
        }
        train_loss.push(sum / order.len().max(1) as f64);
    }
    let eval_idx = if val_idx.is_empty() { &train_idx } else { &val_idx };
    let samples: Vec<Sample<T>> = eval_idx.iter().map(|&i| split.source[i].clone()).collect();
    let truth: Vec<usize> = eval_idx.iter().map(|&i| labels[i]).collect();
    let probs = predict(&model, &samples, EVAL_CHUNK)?;
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let source_val_acc = AccuracyReport::from_predictions(&pred, &truth, c)?.overall;
    Ok(PretrainOutcome { checkpoint: Checkpoint::from_model(&model, Some(source_val_acc)), source_val_acc, train_loss })
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome<T> {
    pub model: VisionTransformer<T>,
    pub metrics: Vec<EpochMetrics>,
    /// Target accuracy of the source model before any adaptation step.
    pub initial_target_acc: f64,
    pub final_report: AccuracyReport,
    pub classifier_digest_before: String,
    pub classifier_digest_after: String,
}

impl<T: Scalar> AdaptOutcome<T> {
    pub fn final_target_acc(&self) -> f64 {
        self.final_report.overall
    }
}

fn eval_target<T: Scalar>(
    split: &DatasetSplit<T>,
    mode: EvalSplit,
    unlabeled_probs: &[Vec<T>],
    model: &VisionTransformer<T>,
) -> Result<AccuracyReport> {
    let c = split.num_classes;
    match mode {
        EvalSplit::Transductive => {
            let pred: Vec<usize> = unlabeled_probs.iter().map(|p| argmax(p)).collect();
            AccuracyReport::from_predictions(&pred, &split.unlabeled_truth, c)
        }
        EvalSplit::Holdout => {
            if split.target_holdout.is_empty() {
                return Err(Error::Config("holdout evaluation requested but n_holdout is 0".into()));
            }
            let truth: Vec<usize> = split.target_holdout.iter().map(|s| s.label.expect("labelled holdout")).collect();
            let probs = predict(model, &split.target_holdout, EVAL_CHUNK)?;
            let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
            AccuracyReport::from_predictions(&pred, &truth, c)
        }
    }
}

/// Adapts the encoder of a source checkpoint to the target domain with the classifier frozen.
///
/// `on_epoch` sees each metrics record as soon as its epoch ends.
pub fn adapt_target<T: Scalar>(
    split: &DatasetSplit<T>,
    source: &Checkpoint<T>,
    config: &RunConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<AdaptOutcome<T>> {
    let tc = &config.train;
    let w = &config.loss;
    let seed = tc.seed;
    let c = split.num_classes;
    let mut model = source.to_model()?;
    model.freeze_classifier();
    let digest_before = classifier_digest(&model);

    let ids: Vec<u64> = split.target_unlabeled.iter().map(|s| s.id).collect();
    let mut store = PredictionStore::<T>::new(ids.iter().copied(), c, w.alpha);
    let mut probs = predict(&model, &split.target_unlabeled, EVAL_CHUNK)?;
    let initial = eval_target(split, tc.eval_split, &probs, &model)?;
    let opts = BatchOptions { batch_size: tc.batch_size, labeled_batch_size: tc.labeled_batch_size, augment: tc.augment() };
    let sampler = LambdaSampler::Beta { beta: tc.mix_beta, gamma: tc.mix_gamma };
    let mut sgd = Sgd::new(tc.momentum);
    let lr_enc = tc.lr_encoder;
    let mut metrics = Vec::with_capacity(tc.epochs_adapt);
    let mut report = initial.clone();

    for epoch in 1..=tc.epochs_adapt {
        let pseudo = pseudo_labels_from_probs(&ids, &probs);
        let reliable = build_reliable_set(&pseudo, &split.target_unlabeled, &split.target_labeled, tc.k_reliable)?;
        let components = reliable.images()?;
        let comp_labels = reliable.labels();
        let mut rng = derive_rng(seed, BATCH_STREAM, epoch as u64);
        let batches = make_batches(split, &opts, &mut rng)?;
        let n_batches = batches.len();
        let mut sums = LossParts::default();
        let mut sum_all = 0.0;
        for (step, (labeled, unlabeled)) in batches.enumerate() {
            let batch_ids = unlabeled.ids();
            let inputs = StepInputs {
                pseudo: batch_ids.iter().map(|id| pseudo[id].class).collect(),
                ema: store.rows(&batch_ids)?,
                mixed: if w.lambda_rmc > 0.0 && reliable.len() >= 2 {
                    let mut mrng = derive_rng(seed, MIX_STREAM, ((epoch as u64) << 32) | step as u64);
                    let batch = assemble_mixed_batch(&reliable, tc.mix_batch_size, config.data.patch_size, sampler, &mut mrng)?;
                    Some(MixedInputs { batch, components: components.clone(), labels: comp_labels.clone() })
                } else {
                    None
                },
                labeled,
                unlabeled,
            };
            let out = step_gradients(&model, &inputs, w)?;
            sums.base += out.parts.base;
            sums.pwc += out.parts.pwc;
            sums.rmc += out.parts.rmc;
            sums.pr += out.parts.pr;
            sum_all += out.total;
            sgd.step(model.params_mut(), &out.grads, |_| lr_enc);
        }
        probs = predict(&model, &split.target_unlabeled, EVAL_CHUNK)?;
        let pm = ProbMatrix::new_unchecked(ids.len(), c, probs.iter().flatten().copied().collect())?;
        store.update(&ids, &pm)?;
        store.finish_epoch();
        report = eval_target(split, tc.eval_split, &probs, &model)?;
        let nb = n_batches.max(1) as f64;
        let rec = EpochMetrics {
            epoch,
            loss_base: sums.base / nb,
            loss_pwc: sums.pwc / nb,
            loss_rmc: sums.rmc / nb,
            loss_pr: sums.pr / nb,
            loss_all: sum_all / nb,
            target_acc: report.overall,
        };
        on_epoch(&rec);
        metrics.push(rec);
    }
    let digest_after = classifier_digest(&model);
    Ok(AdaptOutcome {
        model,
        metrics,
        initial_target_acc: initial.overall,
        final_report: report,
        classifier_digest_before: digest_before,
        classifier_digest_after: digest_after,
    })
}

/// Target accuracy of a checkpoint before adaptation, with the configured evaluation split.
pub fn source_only_accuracy<T: Scalar>(split: &DatasetSplit<T>, source: &Checkpoint<T>, config: &RunConfig) -> Result<AccuracyReport> {
    let model = source.to_model()?;
    let probs = match config.train.eval_split {
        EvalSplit::Transductive => predict(&model, &split.target_unlabeled, EVAL_CHUNK)?,
        EvalSplit::Holdout => Vec::new(),
    };
    eval_target(split, config.train.eval_split, &probs, &model)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::Domain;

    fn sample(id: u64, label: Option<usize>, fill: f64) -> Sample<f64> {
        Sample { id, image: Tensor::full(&[3, 8, 8], fill), label, domain: Domain::Target }
    }

    fn pl(class: usize, entropy: f64) -> PseudoLabel {
        PseudoLabel { class, entropy }
    }

    #[test]
    fn store_starts_uniform_and_mixes() {
        let mut s = PredictionStore::<f64>::new([1, 2], 2, 0.7);
        assert_eq!(s.get(1).unwrap(), &[0.5, 0.5]);
        let p = ProbMatrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        s.update(&[1], &p).unwrap();
        let r = s.get(1).unwrap();
        assert!((r[0] - 0.35).abs() < 1e-12 && (r[1] - 0.65).abs() < 1e-12);
        assert!(matches!(s.update(&[9], &p), Err(Error::UnknownId(9))));
        assert!(matches!(s.get(9), Err(Error::UnknownId(9))));
    }

    #[test]
    fn store_one_step_from_given_row() {
        let mut s = PredictionStore::<f64>::new([5], 2, 0.7);
        let one_hot = ProbMatrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        // alpha^n decays the uniform start; drive the row to (1, 0) first.
        for _ in 0..200 {
            s.update(&[5], &one_hot).unwrap();
        }
        s.update(&[5], &ProbMatrix::new(1, 2, vec![0.0, 1.0]).unwrap()).unwrap();
        let r = s.get(5).unwrap();
        assert!((r[0] - 0.7).abs() < 1e-12 && (r[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn entropy_and_ties() {
        assert_eq!(entropy(&[1.0f64, 0.0, 0.0]), 0.0);
        assert!((entropy(&[0.25f64; 4]) - 4f64.ln()).abs() < 1e-12);
        let m = pseudo_labels_from_probs(&[3], &[vec![0.4f64, 0.4, 0.2]]);
        assert_eq!(m[&3].class, 0);
    }

    #[test]
    fn reliable_set_sizes() {
        let unl: Vec<_> = (10..22).map(|i| sample(i, None, 0.1)).collect();
        let lab: Vec<_> = (0..4).map(|i| sample(i, Some(i as usize), 0.2)).collect();
        let mut pseudo = BTreeMap::new();
        for (n, s) in unl.iter().enumerate() {
            pseudo.insert(s.id, pl(n % 4, n as f64 * 0.1));
        }
        let r = build_reliable_set(&pseudo, &unl, &lab, 2).unwrap();
        assert_eq!(r.len(), 12);
        let hc: Vec<_> = r.entries.iter().filter(|e| e.provenance == Provenance::HighConfidence).collect();
        // lowest-entropy samples of class 0 are positions 0 and 4
        assert_eq!(hc[0].sample.id, 10);
        assert_eq!(hc[1].sample.id, 14);
        assert!(hc.iter().all(|e| pseudo[&e.sample.id].class == e.label));
        assert_eq!(build_reliable_set(&pseudo, &unl, &lab, 0).unwrap().len(), 4);

        for v in pseudo.values_mut() {
            if v.class == 3 {
                v.class = 0;
            }
        }
        assert_eq!(build_reliable_set(&pseudo, &unl, &lab, 2).unwrap().len(), 4 + 3 * 2);
        pseudo.insert(999, pl(0, 0.0));
        assert!(matches!(build_reliable_set(&pseudo, &unl, &lab, 2), Err(Error::UnknownId(999))));
    }

    fn tiny_reliable(n: usize) -> ReliableSet<f64> {
        ReliableSet {
            entries: (0..n)
                .map(|i| ReliableEntry { sample: sample(i as u64, Some(0), i as f64 / 10.0), label: 0, provenance: Provenance::GroundTruth })
                .collect(),
            k: 0,
        }
    }

    #[test]
    fn mixing_pairs_are_distinct_and_reproducible() {
        let r = tiny_reliable(3);
        let sampler = LambdaSampler::Beta { beta: 1.0, gamma: 1.0 };
        let a = assemble_mixed_batch(&r, 200, 4, sampler, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(a.pairings.iter().all(|p| p.i != p.j));
        assert!(a.specs.iter().all(|s| s.lambdas.len() == 4 && s.lambdas.iter().all(|l| (0.0..=1.0).contains(l))));
        let b = assemble_mixed_batch(&r, 200, 4, sampler, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.pairings, b.pairings);
        assert_eq!(a.specs, b.specs);
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn constant_half_gives_midpoints() {
        let r = tiny_reliable(4);
        let m = assemble_mixed_batch(&r, 10, 4, LambdaSampler::Constant(0.5), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for (k, p) in m.pairings.iter().enumerate() {
            let want = (p.i as f64 / 10.0 + p.j as f64 / 10.0) / 2.0;
            let per = 3 * 8 * 8;
            assert!(m.images.data()[k * per..(k + 1) * per].iter().all(|v| (*v - want).abs() < 1e-15));
        }
    }

    #[test]
    fn singleton_reliable_set_is_rejected() {
        let r = tiny_reliable(1);
        let res = assemble_mixed_batch(&r, 4, 4, LambdaSampler::Constant(0.5), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(res, Err(Error::Validation(_))));
    }

    #[test]
    fn validation_split_is_disjoint() {
        let (train, val) = source_split(50, 0.2, 3);
        assert_eq!(val.len(), 10);
        assert_eq!(train.len(), 40);
        assert!(val.iter().all(|v| !train.contains(v)));
    }
}
