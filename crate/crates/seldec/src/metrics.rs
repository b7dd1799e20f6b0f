//! Probabilistic-quality metrics over full-coverage ensemble
//! predictions: expected calibration error, negative log-likelihood,
//! Brier score, reliability bins, per-class acceptance, and confusion
//! matrices.

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsemblePrediction;
use crate::error::{Error, Result};
use crate::selective::SelectivePolicy;

/// Probabilities are floored here before logs so hard zeros stay finite.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default number of equal-width reliability bins.
pub const DEFAULT_BINS: usize = 15;

/// Equal-width confidence bins on `[0, 1]`; the last bin is right-closed
/// so confidence 1.0 is well-defined.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub num_bins: usize,
    pub bins: Vec<BinStat>,
}

/// Empty bins keep zeroed confidence/accuracy and contribute nothing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

fn bin_index(confidence: f64, num_bins: usize) -> usize {
    ((confidence * num_bins as f64) as usize).min(num_bins - 1)
}

/// Bins trials by confidence = max of the mean probability vector.
pub fn reliability_bins(
    preds: &[EnsemblePrediction],
    labels: &[usize],
    num_bins: usize,
) -> Result<ReliabilityBins> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::InvalidShape(format!(
            "{} predictions, {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if num_bins == 0 {
        return Err(Error::InvalidConfig(vec!["metrics.ece_bins must be >= 1".into()]));
    }
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0f64; num_bins];
    let mut correct = vec![0usize; num_bins];
    for (pred, &label) in preds.iter().zip(labels) {
        let confidence = pred.mean_prob.values()[pred.predicted_class];
        let b = bin_index(confidence, num_bins);
        count[b] += 1;
        conf_sum[b] += confidence;
        if pred.predicted_class == label {
            correct[b] += 1;
        }
    }
    let bins = (0..num_bins)
        .map(|b| BinStat {
            count: count[b],
            mean_confidence: if count[b] == 0 { 0.0 } else { conf_sum[b] / count[b] as f64 },
            accuracy: if count[b] == 0 { 0.0 } else { correct[b] as f64 / count[b] as f64 },
        })
        .collect();
    Ok(ReliabilityBins { num_bins, bins })
}

/// Expected calibration error: bin-weighted |accuracy - confidence|.
pub fn ece(preds: &[EnsemblePrediction], labels: &[usize], num_bins: usize) -> Result<f64> {
    let bins = reliability_bins(preds, labels, num_bins)?;
    let n = preds.len() as f64;
    Ok(bins
        .bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.count as f64 / n) * (b.accuracy - b.mean_confidence).abs())
        .sum())
}

/// Mean negative log-likelihood of the true label under the mean
/// distribution, with probabilities floored at [`PROB_FLOOR`].
pub fn nll(preds: &[EnsemblePrediction], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::InvalidShape(format!(
            "{} predictions, {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(pred, &label)| -pred.mean_prob.values()[label].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / preds.len() as f64)
}

/// Mean squared Euclidean distance to the one-hot label vector.
pub fn brier(preds: &[EnsemblePrediction], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::InvalidShape(format!(
            "{} predictions, {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(pred, &label)| {
            pred.mean_prob
                .values()
                .iter()
                .enumerate()
                .map(|(c, &p)| {
                    let target = if c == label { 1.0 } else { 0.0 };
                    (p - target) * (p - target)
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// Fraction of trials whose predicted class equals the label.
pub fn accuracy(preds: &[EnsemblePrediction], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::InvalidShape(format!(
            "{} predictions, {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let correct =
        preds.iter().zip(labels).filter(|(p, &l)| p.predicted_class == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Acceptance and accepted-subset accuracy for one class at one alpha.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAcceptance {
    pub class: usize,
    /// Trials with this true label; 0 flags a class absent from the set.
    pub n_total: usize,
    pub n_accepted: usize,
    pub acceptance_rate: f64,
    /// Accuracy among accepted trials of this class; 1.0 if none accepted.
    pub accuracy_accepted: f64,
}

/// Per-class acceptance rate and accepted accuracy at grid level `alpha`.
pub fn per_class_acceptance(
    preds: &[EnsemblePrediction],
    labels: &[usize],
    policy: &SelectivePolicy,
    alpha: f64,
    num_classes: usize,
) -> Result<Vec<ClassAcceptance>> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidShape(format!(
            "{} predictions, {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let tau = policy.threshold(alpha)?;
    let mut total = vec![0usize; num_classes];
    let mut accepted = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for (pred, &label) in preds.iter().zip(labels) {
        total[label] += 1;
        if policy.score_kind.score(pred) <= tau {
            accepted[label] += 1;
            if pred.predicted_class == label {
                correct[label] += 1;
            }
        }
    }
    Ok((0..num_classes)
        .map(|k| ClassAcceptance {
            class: k,
            n_total: total[k],
            n_accepted: accepted[k],
            acceptance_rate: if total[k] == 0 { 0.0 } else { accepted[k] as f64 / total[k] as f64 },
            accuracy_accepted: if accepted[k] == 0 {
                1.0
            } else {
                correct[k] as f64 / accepted[k] as f64
            },
        })
        .collect())
}

/// `counts[true][predicted]`, optionally restricted by an accept mask.
pub fn confusion(
    preds: &[EnsemblePrediction],
    labels: &[usize],
    num_classes: usize,
    accepted: Option<&[bool]>,
) -> Result<Vec<Vec<u64>>> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidShape(format!(
            "{} predictions, {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(mask) = accepted {
        if mask.len() != preds.len() {
            return Err(Error::InvalidShape(format!(
                "{} predictions, {} mask entries",
                preds.len(),
                mask.len()
            )));
        }
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (i, (pred, &label)) in preds.iter().zip(labels).enumerate() {
        if accepted.map_or(true, |mask| mask[i]) {
            counts[label][pred.predicted_class] += 1;
        }
    }
    Ok(counts)
}

/// Accept mask for one grid alpha, aligned with `preds`.
pub fn accept_mask(
    preds: &[EnsemblePrediction],
    policy: &SelectivePolicy,
    alpha: f64,
) -> Result<Vec<bool>> {
    let tau = policy.threshold(alpha)?;
    Ok(preds.iter().map(|p| policy.score_kind.score(p) <= tau).collect())
}
