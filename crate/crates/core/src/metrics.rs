//! Evaluation metrics for soft-voted ensembles.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default number of equal-width confidence bins for ECE.
pub const ECE_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdMode {
    /// Mean over head pairs of the fraction of samples where the pair differs.
    #[default]
    Pairwise,
    /// Fraction of samples where not all heads agree.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FlopsSnapshot {
    /// Forward FLOPs per sample of the current (sparse) ensemble.
    pub forward_sparse: f64,
    /// Same with all masks on.
    pub forward_dense: f64,
    /// Cumulative training FLOPs so far.
    pub train_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: usize,
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    /// Prediction disagreement in the configured mode; `None` for one head.
    pub pd: Option<f64>,
    pub perplexity: f64,
    pub head_accuracy: Vec<f64>,
    pub flops: FlopsSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementRecord {
    pub sample: usize,
    pub heads: Vec<usize>,
    pub ensemble: usize,
    pub label: usize,
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return invalid(format!(
            "accuracy needs equal non-empty inputs, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        ));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean `−ln p[label]` with probabilities floored at [`PROB_FLOOR`].
pub fn nll(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return invalid("nll needs equal non-empty inputs");
    }
    let mut total = 0.0;
    for (row, &y) in probs.iter().zip(labels) {
        let Some(&p) = row.get(y) else {
            return invalid(format!("label {y} out of range for {} classes", row.len()));
        };
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

/// Bin (1-based) of a confidence in (0, 1] over `bins` right-closed
/// equal-width bins; 0 maps to bin 1.
pub fn confidence_bin(c: f64, bins: usize) -> usize {
    ((c * bins as f64).ceil() as usize).clamp(1, bins)
}

/// Expected calibration error with equal-width confidence bins.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    if bins < 1 {
        return invalid("ece needs at least one bin");
    }
    if probs.len() != labels.len() {
        return invalid("ece needs one label per row");
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf_sum = vec![0f64; bins];
    for (row, &y) in probs.iter().zip(labels) {
        let pred = crate::model::argmax(row);
        let conf = row[pred];
        let b = confidence_bin(conf, bins) - 1;
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == y {
            correct[b] += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (correct[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

fn check_heads(per_head: &[Vec<usize>]) -> Result<usize> {
    if per_head.len() < 2 {
        return invalid(format!("disagreement needs at least 2 heads, got {}", per_head.len()));
    }
    let n = per_head[0].len();
    if n == 0 || per_head.iter().any(|h| h.len() != n) {
        return invalid("disagreement needs equal non-empty prediction lists");
    }
    Ok(n)
}

/// Prediction disagreement between ensemble members.
pub fn prediction_disagreement(per_head: &[Vec<usize>], mode: PdMode) -> Result<f64> {
    let n = check_heads(per_head)?;
    match mode {
        PdMode::Pairwise => {
            let m = per_head.len();
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for i in 0..m {
                for j in i + 1..m {
                    let differ = per_head[i].iter().zip(&per_head[j]).filter(|(a, b)| a != b).count();
                    sum += differ as f64 / n as f64;
                    pairs += 1;
                }
            }
            Ok(sum / pairs as f64)
        }
        PdMode::Strict => {
            let differ = (0..n)
                .filter(|&s| per_head.iter().any(|h| h[s] != per_head[0][s]))
                .count();
            Ok(differ as f64 / n as f64)
        }
    }
}

/// One record per sample on which the heads do not all agree, by sample id.
pub fn disagreement_breakdown(
    per_head: &[Vec<usize>],
    ensemble: &[usize],
    labels: &[usize],
) -> Result<Vec<DisagreementRecord>> {
    let n = labels.len();
    if ensemble.len() != n || per_head.iter().any(|h| h.len() != n) {
        return invalid("disagreement breakdown needs consistent lengths");
    }
    Ok((0..n)
        .filter(|&s| per_head.iter().any(|h| h[s] != per_head[0][s]))
        .map(|s| DisagreementRecord {
            sample: s,
            heads: per_head.iter().map(|h| h[s]).collect(),
            ensemble: ensemble[s],
            label: labels[s],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 1, 1, 0], &[1, 1, 1, 1]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn nll_cases() {
        assert_eq!(nll(&[vec![1.0, 0.0]], &[0]).unwrap(), 0.0);
        let e = (-1.0f64).exp();
        assert!((nll(&[vec![e, 1.0 - e]], &[0]).unwrap() - 1.0).abs() < 1e-15);
        let v = nll(&[vec![0.5, 0.5], vec![0.75, 0.25]], &[0, 1]).unwrap();
        assert!((v - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!(nll(&[vec![0.5, 0.5]], &[2]).is_err());
        // floor keeps zero-probability labels finite
        assert!(nll(&[vec![1.0, 0.0]], &[1]).unwrap().is_finite());
    }

    #[test]
    fn ece_cases() {
        assert_eq!(ece(&[vec![1.0, 0.0]], &[0], 15).unwrap(), 0.0);
        let v = ece(&[vec![0.9, 0.1], vec![0.6, 0.4]], &[0, 1], 15).unwrap();
        assert!((v - 0.35).abs() < 1e-12);
        assert!(ece(&[vec![1.0]], &[0], 0).is_err());
    }

    #[test]
    fn bins_are_right_closed() {
        assert_eq!(confidence_bin(0.0, 15), 1);
        assert_eq!(confidence_bin(1.0 / 15.0, 15), 1);
        assert_eq!(confidence_bin(1.0, 15), 15);
        assert_eq!(confidence_bin(0.5, 2), 1);
        assert_eq!(confidence_bin(0.50001, 2), 2);
    }

    #[test]
    fn pd_cases() {
        assert_eq!(prediction_disagreement(&[vec![1, 2], vec![1, 2]], PdMode::Pairwise).unwrap(), 0.0);
        assert_eq!(prediction_disagreement(&[vec![1, 2], vec![1, 0]], PdMode::Pairwise).unwrap(), 0.5);
        let v = prediction_disagreement(&[vec![1], vec![1], vec![2]], PdMode::Pairwise).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(prediction_disagreement(&[vec![1], vec![1], vec![2]], PdMode::Strict).unwrap(), 1.0);
        assert!(prediction_disagreement(&[vec![1]], PdMode::Pairwise).is_err());
    }

    #[test]
    fn perplexity_cases() {
        assert!((perplexity(10f64.ln()) - 10.0).abs() < 1e-12);
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(1.0) - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn breakdown_cases() {
        let heads = vec![vec![0, 1, 2], vec![0, 1, 2]];
        assert!(disagreement_breakdown(&heads, &[0, 1, 2], &[0, 1, 1]).unwrap().is_empty());
        let heads = vec![vec![0, 1, 2], vec![0, 2, 2]];
        let recs = disagreement_breakdown(&heads, &[0, 2, 2], &[0, 1, 1]).unwrap();
        assert_eq!(
            recs,
            vec![DisagreementRecord {
                sample: 1,
                heads: vec![1, 2],
                ensemble: 2,
                label: 1
            }]
        );
    }
}
