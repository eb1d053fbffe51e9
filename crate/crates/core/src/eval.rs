//! Top-1 accuracy reports.

use serde::{Deserialize, Serialize};

use crate::backbone::VisionTransformer;
use crate::data::{stack_images, Sample};
use crate::error::{Error, Result};
use crate::losses::argmax;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub total: usize,
    pub correct: usize,
    pub overall: f64,
    /// `None` for classes absent from the evaluated labels.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl AccuracyReport {
    pub fn from_predictions(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::Validation("prediction and label counts differ".into()));
        }
        if let Some(c) = predicted.iter().chain(truth).find(|c| **c >= num_classes) {
            return Err(Error::Validation(format!("class {c} outside [0, {num_classes})")));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (p, t) in predicted.iter().zip(truth) {
            confusion[*t][*p] += 1;
        }
        let total = truth.len();
        let correct = (0..num_classes).map(|c| confusion[c][c]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        let overall = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        Ok(Self { total, correct, overall, per_class, confusion })
    }

    /// Plain-text table of the overall and per-class accuracies.
    pub fn render(&self) -> String {
        let mut out = format!("overall accuracy: {:.4} ({}/{})\n", self.overall, self.correct, self.total);
        for (c, acc) in self.per_class.iter().enumerate() {
            match acc {
                Some(a) => out.push_str(&format!("class {c}: {a:.4}\n")),
                None => out.push_str(&format!("class {c}: n/a\n")),
            }
        }
        out
    }
}

/// Class probabilities for each sample, evaluated in chunks without recording gradients.
pub fn predict<T: Scalar>(model: &VisionTransformer<T>, samples: &[Sample<T>], chunk: usize) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let images = stack_images(part.iter().map(|s| &s.image))?;
        out.extend(model.infer(&images, part.len())?.into_iter().map(|o| o.probs));
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(
    model: &VisionTransformer<T>,
    samples: &[Sample<T>],
    truth: &[usize],
    chunk: usize,
) -> Result<AccuracyReport> {
    let probs = predict(model, samples, chunk)?;
    let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    AccuracyReport::from_predictions(&predicted, truth, model.config().num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_absent_classes() {
        let r = AccuracyReport::from_predictions(&[0, 1, 1], &[0, 1, 1], 3).unwrap();
        assert_eq!(r.overall, 1.0);
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
        assert!(r.render().contains("class 2: n/a"));
    }

    #[test]
    fn confusion_trace_matches_tally() {
        let truth = [0, 0, 1, 2, 2, 2, 3, 1];
        let pred = [0, 1, 1, 2, 0, 2, 3, 3];
        let r = AccuracyReport::from_predictions(&pred, &truth, 4).unwrap();
        let trace: usize = (0..4).map(|c| r.confusion[c][c]).sum();
        let tally = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
        assert_eq!(trace, tally);
        assert_eq!(r.overall, 5.0 / 8.0);
        assert_eq!(r.per_class[2], Some(2.0 / 3.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(AccuracyReport::from_predictions(&[0], &[0, 1], 2).is_err());
        assert!(AccuracyReport::from_predictions(&[5], &[0], 2).is_err());
    }
}
