//! Adaptation objectives defined on classifier probabilities.
//!
//! Every loss is a pure function of probability matrices and returns its value
//! together with the gradient with respect to each probability input, so the
//! training loop can seed the backward pass of the network with
//! `weight * dL/dP`. Pair weights and attention-rescaled mixing coefficients
//! are constants of the objective: they never carry gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SIMPLEX_TOL: f64 = 1e-5;
pub const LOG_CLAMP: f64 = 1e-12;
pub const PR_CLAMP: f64 = 1e-6;

/// Row-stochastic `[rows x cols]` matrix of class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Scalar> ProbMatrix<T> {
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        let m = Self::new_unchecked(rows, cols, values)?;
        let tol = T::from_f64_lossy(SIMPLEX_TOL);
        for r in 0..rows {
            let row = m.row(r);
            if row.iter().any(|v| !(*v >= T::zero())) {
                return Err(Error::Validation(format!("row {r} has a negative or NaN probability")));
            }
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > tol {
                return Err(Error::Validation(format!("row {r} sums to {s}")));
            }
        }
        Ok(m)
    }

    /// Skips the simplex check; only the element count is validated.
    ///
    /// Used where the matrix is perturbed off the simplex, e.g. by finite
    /// differences.
    pub fn new_unchecked(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} matrix needs {} values, got {}", rows * cols, values.len())));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Lowest-index argmax of every row.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows).map(|r| argmax(self.row(r))).collect()
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    GroundTruth,
    PseudoLabel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryAssignment {
    pub labels: Vec<usize>,
    pub source: LabelSource,
}

impl CategoryAssignment {
    pub fn new(labels: Vec<usize>, source: LabelSource, num_classes: usize) -> Result<Self> {
        if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::Validation(format!("category {l} outside [0, {num_classes})")));
        }
        Ok(Self { labels, source })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pwc: f64,
    pub lambda_rmc: f64,
    pub lambda_pr: f64,
    pub tau: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_pwc: 0.1, lambda_rmc: 0.1, lambda_pr: 3.0, tau: 0.15, alpha: 0.7 }
    }
}

impl LossWeights {
    /// Loss weights may be zero (component disabled) but never negative.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_pwc", self.lambda_pwc), ("lambda_rmc", self.lambda_rmc), ("lambda_pr", self.lambda_pr)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Scalar loss value with its gradient with respect to one probability matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Vec<T>,
}

/// Pair weight between rows `i` and `k`.
///
/// `1` for the same sample, the probability agreement `p_i . p_k` for two
/// samples of the same category and `0` otherwise.
pub fn adaptive_weight<T: Scalar>(p_i: &[T], p_k: &[T], cat_i: usize, cat_k: usize, same_index: bool) -> T {
    if same_index {
        T::one()
    } else if cat_i == cat_k {
        dot(p_i, p_k)
    } else {
        T::zero()
    }
}

/// Row-major `[2N x 2N]` pair weights for a weak/strong stacked batch.
///
/// Row `i` and row `(i + N) mod 2N` are the two views of one sample. The
/// diagonal is zero: a row is never its own positive.
pub fn pwc_weights<T: Scalar>(p: &ProbMatrix<T>, cats: &CategoryAssignment) -> Result<Vec<T>> {
    let n2 = p.rows();
    check_pwc_shape(p, cats)?;
    let half = n2 / 2;
    let mut w = vec![T::zero(); n2 * n2];
    for i in 0..n2 {
        for k in 0..n2 {
            if k == i {
                continue;
            }
            let partner = (i + half) % n2 == k;
            w[i * n2 + k] = adaptive_weight(p.row(i), p.row(k), cats.labels[i], cats.labels[k], partner);
        }
    }
    Ok(w)
}

fn check_pwc_shape<T: Scalar>(p: &ProbMatrix<T>, cats: &CategoryAssignment) -> Result<()> {
    if p.rows() < 2 {
        return Err(Error::Validation("contrastive loss needs at least two rows".into()));
    }
    if p.rows() % 2 != 0 {
        return Err(Error::Validation(format!("expected stacked weak/strong views, got {} rows", p.rows())));
    }
    if cats.labels.len() != p.rows() {
        return Err(Error::Validation(format!("{} categories for {} rows", cats.labels.len(), p.rows())));
    }
    Ok(())
}

/// Probability-weighted contrastive loss over stacked weak and strong views.
pub fn pwc_loss<T: Scalar>(p: &ProbMatrix<T>, cats: &CategoryAssignment, tau: f64) -> Result<LossGrad<T>> {
    let w = pwc_weights(p, cats)?;
    pwc_loss_weighted(p, &w, tau)
}

/// [`pwc_loss`] with explicit, fixed pair weights (diagonal ignored).
pub fn pwc_loss_weighted<T: Scalar>(p: &ProbMatrix<T>, weights: &[T], tau: f64) -> Result<LossGrad<T>> {
    let n = p.rows();
    if n < 2 {
        return Err(Error::Validation("contrastive loss needs at least two rows".into()));
    }
    if weights.len() != n * n {
        return Err(Error::Shape(format!("expected {} pair weights, got {}", n * n, weights.len())));
    }
    let inv_tau = T::from_f64_lossy(1.0 / tau);
    let c = p.cols();
    let mut sim = vec![T::zero(); n * n];
    for i in 0..n {
        for k in 0..n {
            sim[i * n + k] = dot(p.row(i), p.row(k)) * inv_tau;
        }
    }
    let mut pairs = 0usize;
    let mut total = T::zero();
    // d total / d sim
    let mut dsim = vec![T::zero(); n * n];
    for i in 0..n {
        let row = &sim[i * n..(i + 1) * n];
        let (lse, soft) = log_sum_exp_excluding(row, Some(i));
        let mut wsum = T::zero();
        for k in 0..n {
            let wik = weights[i * n + k];
            if k == i || wik <= T::zero() {
                continue;
            }
            pairs += 1;
            wsum += wik;
            total -= wik * (row[k] - lse);
            dsim[i * n + k] -= wik;
        }
        for k in 0..n {
            if k != i {
                dsim[i * n + k] += wsum * soft[k];
            }
        }
    }
    let norm = T::from_usize(pairs.max(1)).unwrap();
    let mut grad = vec![T::zero(); n * c];
    for i in 0..n {
        for k in 0..n {
            let d = dsim[i * n + k] * inv_tau / norm;
            if d == T::zero() {
                continue;
            }
            for col in 0..c {
                grad[i * c + col] += d * p.row(k)[col];
                grad[k * c + col] += d * p.row(i)[col];
            }
        }
    }
    Ok(LossGrad { value: total / norm, grad })
}

/// `log sum_j exp(x_j)` over `j != skip`, plus the matching softmax weights.
fn log_sum_exp_excluding<T: Scalar>(x: &[T], skip: Option<usize>) -> (T, Vec<T>) {
    let keep = |j: usize| Some(j) != skip;
    let max = x.iter().enumerate().filter(|(j, _)| keep(*j)).map(|(_, v)| *v).fold(T::neg_infinity(), T::max);
    let mut soft: Vec<T> = x.iter().enumerate().map(|(j, v)| if keep(j) { (*v - max).exp() } else { T::zero() }).collect();
    let s: T = soft.iter().copied().sum();
    soft.iter_mut().for_each(|v| *v /= s);
    (max + s.ln(), soft)
}

/// Negative log-likelihood of mixed samples against both component labels.
///
/// Mean over mixed rows of `-(l * log P[y_i] + (1 - l) * log P[y_j])`.
pub fn mixup_ce_loss<T: Scalar>(p_mix: &ProbMatrix<T>, y_i: &[usize], y_j: &[usize], lam_hat: &[T]) -> Result<LossGrad<T>> {
    let b = p_mix.rows();
    let c = p_mix.cols();
    if y_i.len() != b || y_j.len() != b || lam_hat.len() != b {
        return Err(Error::Validation("mixup cross-entropy: label/coefficient count mismatch".into()));
    }
    if b == 0 {
        return Err(Error::Validation("mixup cross-entropy on an empty batch".into()));
    }
    if let Some(l) = lam_hat.iter().find(|l| !(**l >= T::zero() && **l <= T::one())) {
        return Err(Error::Validation(format!("mixing coefficient {l} outside [0, 1]")));
    }
    if let Some(y) = y_i.iter().chain(y_j).find(|y| **y >= c) {
        return Err(Error::Validation(format!("label {y} outside [0, {c})")));
    }
    let eps = T::from_f64_lossy(LOG_CLAMP);
    let bf = T::from_usize(b).unwrap();
    let mut value = T::zero();
    let mut grad = vec![T::zero(); b * c];
    for k in 0..b {
        let row = p_mix.row(k);
        for (y, wt) in [(y_i[k], lam_hat[k]), (y_j[k], T::one() - lam_hat[k])] {
            let (lv, dl) = clamped_log(row[y], eps);
            value -= wt * lv;
            grad[k * c + y] -= wt * dl / bf;
        }
    }
    Ok(LossGrad { value: value / bf, grad })
}

/// `ln(max(x, eps))` and its derivative (zero where the clamp is active).
fn clamped_log<T: Scalar>(x: T, eps: T) -> (T, T) {
    if x > eps {
        (x.ln(), T::one() / x)
    } else {
        (eps.ln(), T::zero())
    }
}

/// Component indices of one mixed sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixPairing {
    pub i: usize,
    pub j: usize,
}

/// Pair weights of the mixed-sample contrastive loss.
///
/// `toward_i[k * M + r]` weighs component row `r` as a positive for mixed row
/// `k` through its first component, `toward_j` through its second.
#[derive(Clone, Debug, PartialEq)]
pub struct MixConWeights<T> {
    pub toward_i: Vec<T>,
    pub toward_j: Vec<T>,
}

pub fn mixup_contrastive_weights<T: Scalar>(
    p_mix: &ProbMatrix<T>,
    p_comp: &ProbMatrix<T>,
    pairing: &[MixPairing],
    comp_cats: &[usize],
) -> Result<MixConWeights<T>> {
    check_mixcon_shape(p_mix, p_comp, pairing)?;
    if comp_cats.len() != p_comp.rows() {
        return Err(Error::Validation("one category per component row required".into()));
    }
    let (b, m) = (p_mix.rows(), p_comp.rows());
    let mut toward_i = vec![T::zero(); b * m];
    let mut toward_j = vec![T::zero(); b * m];
    for (k, pair) in pairing.iter().enumerate() {
        for r in 0..m {
            let anchor = p_mix.row(k);
            let cand = p_comp.row(r);
            toward_i[k * m + r] = adaptive_weight(anchor, cand, comp_cats[pair.i], comp_cats[r], r == pair.i);
            toward_j[k * m + r] = adaptive_weight(anchor, cand, comp_cats[pair.j], comp_cats[r], r == pair.j);
        }
    }
    Ok(MixConWeights { toward_i, toward_j })
}

fn check_mixcon_shape<T: Scalar>(p_mix: &ProbMatrix<T>, p_comp: &ProbMatrix<T>, pairing: &[MixPairing]) -> Result<()> {
    if p_comp.rows() < 2 {
        return Err(Error::Validation("mixup contrastive loss needs at least two component rows".into()));
    }
    if p_mix.rows() == 0 || pairing.len() != p_mix.rows() {
        return Err(Error::Validation("one pairing per mixed row required".into()));
    }
    if p_mix.cols() != p_comp.cols() {
        return Err(Error::Shape("mixed and component class counts differ".into()));
    }
    if let Some(p) = pairing.iter().find(|p| p.i >= p_comp.rows() || p.j >= p_comp.rows()) {
        return Err(Error::Validation(format!("pairing {p:?} outside the component rows")));
    }
    Ok(())
}

/// Value and gradients of the mixed-sample contrastive loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MixConGrad<T> {
    pub value: T,
    pub grad_mix: Vec<T>,
    pub grad_components: Vec<T>,
}

/// Contrastive loss anchored at mixed samples, pulled toward both components.
pub fn mixup_contrastive_loss<T: Scalar>(
    p_mix: &ProbMatrix<T>,
    p_comp: &ProbMatrix<T>,
    pairing: &[MixPairing],
    lam_hat: &[T],
    comp_cats: &[usize],
    tau: f64,
) -> Result<MixConGrad<T>> {
    let w = mixup_contrastive_weights(p_mix, p_comp, pairing, comp_cats)?;
    mixup_contrastive_loss_weighted(p_mix, p_comp, &w, lam_hat, tau)
}

/// [`mixup_contrastive_loss`] with explicit, fixed pair weights.
///
/// The normaliser counts the (row, candidate, direction) terms whose effective
/// weight `l * w` or `(1 - l) * w` is positive.
pub fn mixup_contrastive_loss_weighted<T: Scalar>(
    p_mix: &ProbMatrix<T>,
    p_comp: &ProbMatrix<T>,
    weights: &MixConWeights<T>,
    lam_hat: &[T],
    tau: f64,
) -> Result<MixConGrad<T>> {
    let (b, m, c) = (p_mix.rows(), p_comp.rows(), p_mix.cols());
    if m < 2 {
        return Err(Error::Validation("mixup contrastive loss needs at least two component rows".into()));
    }
    if lam_hat.len() != b || weights.toward_i.len() != b * m || weights.toward_j.len() != b * m {
        return Err(Error::Validation("mixup contrastive: weight/coefficient count mismatch".into()));
    }
    let inv_tau = T::from_f64_lossy(1.0 / tau);
    let mut terms = 0usize;
    let mut total = T::zero();
    let mut dsim = vec![T::zero(); b * m];
    for k in 0..b {
        let sim: Vec<T> = (0..m).map(|r| dot(p_mix.row(k), p_comp.row(r)) * inv_tau).collect();
        let (lse, soft) = log_sum_exp_excluding(&sim, None);
        let mut esum = T::zero();
        for r in 0..m {
            for eff in [lam_hat[k] * weights.toward_i[k * m + r], (T::one() - lam_hat[k]) * weights.toward_j[k * m + r]] {
                if eff > T::zero() {
                    terms += 1;
                    esum += eff;
                    total -= eff * (sim[r] - lse);
                    dsim[k * m + r] -= eff;
                }
            }
        }
        for r in 0..m {
            dsim[k * m + r] += esum * soft[r];
        }
    }
    let norm = T::from_usize(terms.max(1)).unwrap();
    let mut grad_mix = vec![T::zero(); b * c];
    let mut grad_components = vec![T::zero(); m * c];
    for k in 0..b {
        for r in 0..m {
            let d = dsim[k * m + r] * inv_tau / norm;
            if d == T::zero() {
                continue;
            }
            for col in 0..c {
                grad_mix[k * c + col] += d * p_comp.row(r)[col];
                grad_components[r * c + col] += d * p_mix.row(k)[col];
            }
        }
    }
    Ok(MixConGrad { value: total / norm, grad_mix, grad_components })
}

/// Combined mixup cross-entropy and mixup contrastive objective.
#[derive(Clone, Debug, PartialEq)]
pub struct RmcLoss<T> {
    pub mix_ce: T,
    pub mix_con: T,
    pub value: T,
    pub grad_mix: Vec<T>,
    pub grad_components: Vec<T>,
}

pub fn rmc_loss<T: Scalar>(
    p_mix: &ProbMatrix<T>,
    p_comp: &ProbMatrix<T>,
    pairing: &[MixPairing],
    lam_hat: &[T],
    comp_labels: &[usize],
    tau: f64,
) -> Result<RmcLoss<T>> {
    let con = mixup_contrastive_loss(p_mix, p_comp, pairing, lam_hat, comp_labels, tau)?;
    let y_i: Vec<usize> = pairing.iter().map(|p| comp_labels[p.i]).collect();
    let y_j: Vec<usize> = pairing.iter().map(|p| comp_labels[p.j]).collect();
    let ce = mixup_ce_loss(p_mix, &y_i, &y_j, lam_hat)?;
    let grad_mix = ce.grad.iter().zip(&con.grad_mix).map(|(a, b)| *a + *b).collect();
    Ok(RmcLoss {
        mix_ce: ce.value,
        mix_con: con.value,
        value: rmc_total(ce.value, con.value),
        grad_mix,
        grad_components: con.grad_components,
    })
}

pub fn rmc_total<T: Scalar>(mix_ce: T, mix_con: T) -> T {
    mix_ce + mix_con
}

/// Agreement penalty against moving-average predictions.
///
/// Mean over rows of `log(1 - min(ema_i . p_i, 1 - 1e-6))`; the averages are
/// constants.
pub fn pr_loss<T: Scalar>(p: &ProbMatrix<T>, ema: &ProbMatrix<T>) -> Result<LossGrad<T>> {
    if p.rows() != ema.rows() || p.cols() != ema.cols() {
        return Err(Error::Shape("prediction and moving-average shapes differ".into()));
    }
    let (n, c) = (p.rows(), p.cols());
    if n == 0 {
        return Err(Error::Validation("regularisation on an empty batch".into()));
    }
    let cap = T::one() - T::from_f64_lossy(PR_CLAMP);
    let nf = T::from_usize(n).unwrap();
    let mut value = T::zero();
    let mut grad = vec![T::zero(); n * c];
    for i in 0..n {
        let inner = dot(ema.row(i), p.row(i));
        if inner < cap {
            value += (T::one() - inner).ln();
            let d = -T::one() / ((T::one() - inner) * nf);
            for col in 0..c {
                grad[i * c + col] = d * ema.row(i)[col];
            }
        } else {
            value += (T::one() - cap).ln();
        }
    }
    Ok(LossGrad { value: value / nf, grad })
}

/// Supervised, pseudo-label and information-maximisation terms.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseLoss<T> {
    pub value: T,
    pub ce_labeled: T,
    pub ce_pseudo: T,
    /// Mean per-sample entropy minus entropy of the mean prediction.
    pub info_max: T,
    pub grad_labeled: Vec<T>,
    pub grad_unlabeled: Vec<T>,
}

/// `CE(labeled) + CE(pseudo-labeled) + mean H(p_i) - H(mean p)`.
///
/// The batch mean is taken over the unlabeled rows. Either set may be empty,
/// in which case its terms are zero.
pub fn base_loss<T: Scalar>(
    p_labeled: &ProbMatrix<T>,
    y_labeled: &[usize],
    p_unlabeled: &ProbMatrix<T>,
    pseudo_y: &[usize],
) -> Result<BaseLoss<T>> {
    if y_labeled.len() != p_labeled.rows() || pseudo_y.len() != p_unlabeled.rows() {
        return Err(Error::Validation("base loss: label count mismatch".into()));
    }
    let eps = T::from_f64_lossy(LOG_CLAMP);
    let (grad_labeled, ce_labeled) = cross_entropy(p_labeled, y_labeled, eps)?;
    let (mut grad_unlabeled, ce_pseudo) = cross_entropy(p_unlabeled, pseudo_y, eps)?;

    let (n, c) = (p_unlabeled.rows(), p_unlabeled.cols());
    let mut info_max = T::zero();
    if n > 0 {
        let nf = T::from_usize(n).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut ent = T::zero();
        for i in 0..n {
            let row = p_unlabeled.row(i);
            for col in 0..c {
                mean[col] += row[col] / nf;
                let (plogp, d) = neg_entropy_term(row[col], eps);
                ent -= plogp / nf;
                // d(mean_i H(p_i)) / dp = -(log p + 1) / n
                grad_unlabeled[i * c + col] -= d / nf;
            }
        }
        let mut ent_mean = T::zero();
        let mut dmean = vec![T::zero(); c];
        for col in 0..c {
            let (plogp, d) = neg_entropy_term(mean[col], eps);
            ent_mean -= plogp;
            // -H(mean) contributes +(log m + 1) per column, spread over rows
            dmean[col] = d / nf;
        }
        for i in 0..n {
            for col in 0..c {
                grad_unlabeled[i * c + col] += dmean[col];
            }
        }
        info_max = ent - ent_mean;
    }
    Ok(BaseLoss {
        value: ce_labeled + ce_pseudo + info_max,
        ce_labeled,
        ce_pseudo,
        info_max,
        grad_labeled,
        grad_unlabeled,
    })
}

/// `p ln p` with clamped log, and its derivative.
fn neg_entropy_term<T: Scalar>(p: T, eps: T) -> (T, T) {
    if p > eps {
        (p * p.ln(), p.ln() + T::one())
    } else {
        (p * eps.ln(), eps.ln())
    }
}

fn cross_entropy<T: Scalar>(p: &ProbMatrix<T>, y: &[usize], eps: T) -> Result<(Vec<T>, T)> {
    let (n, c) = (p.rows(), p.cols());
    let mut grad = vec![T::zero(); n * c];
    if n == 0 {
        return Ok((grad, T::zero()));
    }
    if let Some(l) = y.iter().find(|l| **l >= c) {
        return Err(Error::Validation(format!("label {l} outside [0, {c})")));
    }
    let nf = T::from_usize(n).unwrap();
    let mut value = T::zero();
    for (i, &label) in y.iter().enumerate() {
        let (lv, d) = clamped_log(p.row(i)[label], eps);
        value -= lv;
        grad[i * c + label] = -d / nf;
    }
    Ok((grad, value / nf))
}

/// Scalar values of every objective entering the overall loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub base: f64,
    pub pwc: f64,
    pub rmc: f64,
    pub pr: f64,
}

/// `base + lambda_pwc * pwc + lambda_rmc * rmc + lambda_pr * pr`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (component, value) in [("base", parts.base), ("pwc", parts.pwc), ("rmc", parts.rmc), ("pr", parts.pr)] {
        if !value.is_finite() {
            return Err(Error::NonFinite { component, value });
        }
    }
    Ok(parts.base + w.lambda_pwc * parts.pwc + w.lambda_rmc * parts.rmc + w.lambda_pr * parts.pr)
}
