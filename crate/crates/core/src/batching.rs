//! Epoch batching of labelled and unlabelled target data.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::RandAugment;
use crate::data::{derive_rng, stack_images, AugmentedPair, DatasetSplit};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const AUGMENT_STREAM: u64 = 2;

#[derive(Clone, Debug)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub labeled_batch_size: usize,
    pub augment: RandAugment,
}

/// Sample indices for one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    /// Indices into `target_unlabeled`; full batches only.
    pub unlabeled: Vec<Vec<usize>>,
    /// Indices into `target_labeled`, drawn with replacement.
    pub labeled: Vec<Vec<usize>>,
    augment_seed: u64,
}

#[derive(Clone, Debug)]
pub struct LabeledBatch<T> {
    pub ids: Vec<u64>,
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct UnlabeledBatch<T> {
    /// Positions in `target_unlabeled`.
    pub indices: Vec<usize>,
    pub pairs: Vec<AugmentedPair<T>>,
}

impl<T: Scalar> UnlabeledBatch<T> {
    pub fn ids(&self) -> Vec<u64> {
        self.pairs.iter().map(|p| p.id).collect()
    }

    pub fn weak(&self) -> Result<Tensor<T>> {
        stack_images(self.pairs.iter().map(|p| &p.weak))
    }

    pub fn strong(&self) -> Result<Tensor<T>> {
        stack_images(self.pairs.iter().map(|p| &p.strong))
    }

    /// Weak views followed by strong views, `[2B, C, H, W]`.
    pub fn stacked(&self) -> Result<Tensor<T>> {
        stack_images(self.pairs.iter().map(|p| &p.weak).chain(self.pairs.iter().map(|p| &p.strong)))
    }
}

pub fn plan_epoch<R: Rng + ?Sized>(n_labeled: usize, n_unlabeled: usize, opts: &BatchOptions, rng: &mut R) -> Result<EpochPlan> {
    if opts.batch_size < 2 {
        return Err(Error::Config(format!("batch_size must be at least 2, got {}", opts.batch_size)));
    }
    if n_labeled == 0 || n_unlabeled == 0 {
        return Err(Error::Config("batching needs labelled and unlabelled target samples".into()));
    }
    if n_unlabeled < opts.batch_size {
        return Err(Error::Config(format!("{n_unlabeled} unlabelled samples cannot fill a batch of {}", opts.batch_size)));
    }
    let mut order: Vec<usize> = (0..n_unlabeled).collect();
    order.shuffle(rng);
    let unlabeled: Vec<Vec<usize>> = order.chunks_exact(opts.batch_size).map(<[usize]>::to_vec).collect();
    let labeled = (0..unlabeled.len())
        .map(|_| (0..opts.labeled_batch_size.max(1)).map(|_| rng.random_range(0..n_labeled)).collect())
        .collect();
    Ok(EpochPlan { unlabeled, labeled, augment_seed: rng.random() })
}

/// Iterator over `(labelled, unlabelled)` batch pairs of one epoch.
///
/// Strong views come from a generator keyed by the epoch and sample id, so
/// they do not depend on the order in which batches are materialised.
pub struct Batches<'a, T> {
    split: &'a DatasetSplit<T>,
    plan: EpochPlan,
    augment: RandAugment,
    next: usize,
}

impl<'a, T: Scalar> Batches<'a, T> {
    pub fn plan(&self) -> &EpochPlan {
        &self.plan
    }

    pub fn len(&self) -> usize {
        self.plan.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plan.unlabeled.is_empty()
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = (LabeledBatch<T>, UnlabeledBatch<T>);

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.next;
        let idx = self.plan.unlabeled.get(b)?;
        self.next += 1;
        let pairs = idx
            .iter()
            .map(|&i| {
                let s = &self.split.target_unlabeled[i];
                let mut rng = derive_rng(self.plan.augment_seed, AUGMENT_STREAM, s.id);
                AugmentedPair { id: s.id, weak: s.image.clone(), strong: self.augment.apply(&s.image, &mut rng) }
            })
            .collect();
        let lab = &self.plan.labeled[b];
        let samples: Vec<_> = lab.iter().map(|&i| &self.split.target_labeled[i]).collect();
        let labeled = LabeledBatch {
            ids: samples.iter().map(|s| s.id).collect(),
            images: stack_images(samples.iter().map(|s| &s.image)).expect("uniform image shapes"),
            labels: samples.iter().map(|s| s.label.expect("labelled split")).collect(),
        };
        Some((labeled, UnlabeledBatch { indices: idx.clone(), pairs }))
    }
}

pub fn make_batches<'a, T: Scalar, R: Rng + ?Sized>(
    split: &'a DatasetSplit<T>,
    opts: &BatchOptions,
    rng: &mut R,
) -> Result<Batches<'a, T>> {
    let plan = plan_epoch(split.target_labeled.len(), split.target_unlabeled.len(), opts, rng)?;
    Ok(Batches { split, plan, augment: opts.augment, next: 0 })
}
