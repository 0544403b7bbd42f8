//! Detection and diagnosis evaluation metrics.

use super::point_adjust;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
    /// False when there were no predicted positives, in which case
    /// precision is reported as 0.
    pub precision_defined: bool,
}

/// Standard confusion metrics with F1 computed after point adjusting the
/// predictions against the true segments; AUROC is computed from the raw
/// scores by rank statistics (equivalent to a full threshold sweep).
pub fn detection_metrics(scores: &[f64], pred: &[bool], truth: &[bool]) -> Result<DetectionMetrics> {
    if pred.len() != truth.len() || scores.len() != truth.len() {
        return Err(Error::shape(
            format!("{} points", truth.len()),
            format!("pred {} / scores {}", pred.len(), scores.len()),
        ));
    }
    if truth.is_empty() {
        return Err(Error::contract("detection_metrics needs at least one point"));
    }
    let adjusted = point_adjust(pred, truth)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut fn_ = 0usize;
    for (&p, &t) in adjusted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n = truth.len() as f64;
    let accuracy = (tp + tn) as f64 / n;
    let precision_defined = tp + fp > 0;
    let precision = if precision_defined { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(DetectionMetrics {
        accuracy,
        precision,
        recall,
        f1,
        auroc: auroc(scores, truth)?,
        precision_defined,
    })
}

/// Area under the ROC curve via the rank-sum statistic with average
/// ranks for ties. Returns 0.5 when one class is absent.
pub fn auroc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::shape(format!("{} points", truth.len()), format!("{}", scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numerical("auroc: non-finite score"));
    }
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(0.5);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Average ranks over tie groups (1-based ranks).
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = truth
        .iter()
        .enumerate()
        .filter(|(_, &t)| t)
        .map(|(i, _)| ranks[i])
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisMetrics {
    pub hitrate_100: f64,
    pub ndcg_100: f64,
}

/// Ranking quality of per-host scores against the true faulty host set,
/// both truncated at g = |truth|. Ties rank the lower host id first.
pub fn diagnosis_metrics(
    per_host_scores: &[f64],
    truth: &BTreeSet<usize>,
) -> Result<DiagnosisMetrics> {
    if truth.is_empty() {
        return Err(Error::contract("diagnosis_metrics needs a non-empty truth set"));
    }
    if let Some(&max) = truth.iter().max() {
        if max >= per_host_scores.len() {
            return Err(Error::contract(format!(
                "truth host {max} outside score vector of length {}",
                per_host_scores.len()
            )));
        }
    }
    let g = truth.len().min(per_host_scores.len());
    let mut order: Vec<usize> = (0..per_host_scores.len()).collect();
    order.sort_by(|&a, &b| {
        per_host_scores[b]
            .partial_cmp(&per_host_scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let top = &order[..g];
    let hits = top.iter().filter(|h| truth.contains(h)).count();
    let hitrate = hits as f64 / g as f64;

    let dcg: f64 = top
        .iter()
        .enumerate()
        .map(|(i, h)| if truth.contains(h) { 1.0 / ((i + 2) as f64).log2() } else { 0.0 })
        .sum();
    let idcg: f64 = (0..g).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    Ok(DiagnosisMetrics { hitrate_100: hitrate, ndcg_100: dcg / idcg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn perfect_prediction_scores_one() {
        let truth = vec![false, true, true, false, true];
        let scores: Vec<f64> = truth.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        let m = detection_metrics(&scores, &truth, &truth).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.auroc, 1.0);
    }

    #[test]
    fn inverted_prediction_on_balanced_data() {
        let truth = vec![true, true, false, false];
        let pred = vec![false, false, true, true];
        let scores = vec![0.0, 0.0, 1.0, 1.0];
        let m = detection_metrics(&scores, &pred, &truth).unwrap();
        assert_eq!(m.accuracy, 0.0);
        assert_eq!(m.auroc, 0.0);
    }

    #[test]
    fn no_predicted_positives_flags_precision() {
        let truth = vec![true, false];
        let pred = vec![false, false];
        let m = detection_metrics(&[0.1, 0.2], &pred, &truth).unwrap();
        assert!(!m.precision_defined);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn point_adjust_raises_f1() {
        let truth = vec![false, true, true, true, false];
        let pred = vec![false, false, true, false, false];
        let scores = vec![0.0, 0.1, 0.9, 0.2, 0.0];
        let m = detection_metrics(&scores, &pred, &truth).unwrap();
        // Raw F1 would be 2*1*(1/3)/(1+1/3) = 0.5; adjusted is 1.0.
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn auroc_random_scores_near_half() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let truth: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        let a = auroc(&scores, &truth).unwrap();
        assert!((a - 0.5).abs() < 0.02, "auroc {a}");
    }

    #[test]
    fn auroc_handles_ties_symmetrically() {
        let scores = vec![0.5, 0.5, 0.5, 0.5];
        let truth = vec![true, false, true, false];
        assert_abs_diff_eq!(auroc(&scores, &truth).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn diagnosis_perfect_ranking() {
        let truth: BTreeSet<usize> = [0, 1].into_iter().collect();
        let scores = vec![0.9, 0.8, 0.1, 0.0];
        let d = diagnosis_metrics(&scores, &truth).unwrap();
        assert_eq!(d.hitrate_100, 1.0);
        assert_eq!(d.ndcg_100, 1.0);
    }

    #[test]
    fn diagnosis_miss_in_top_one() {
        let truth: BTreeSet<usize> = [0].into_iter().collect();
        let scores = vec![0.5, 0.9];
        let d = diagnosis_metrics(&scores, &truth).unwrap();
        assert_eq!(d.hitrate_100, 0.0);
        assert_eq!(d.ndcg_100, 0.0);
    }

    #[test]
    fn diagnosis_interleaved_ranking() {
        // Truth {h1, h2}; ranking h1, h3, h2, rest.
        let truth: BTreeSet<usize> = [1, 2].into_iter().collect();
        let scores = vec![0.1, 0.9, 0.4, 0.5];
        let d = diagnosis_metrics(&scores, &truth).unwrap();
        assert_eq!(d.hitrate_100, 0.5);
        let expected = 1.0 / (1.0 + 1.0 / 3.0_f64.log2());
        assert_abs_diff_eq!(d.ndcg_100, expected, epsilon = 1e-9);
    }

    #[test]
    fn diagnosis_rejects_empty_truth() {
        let truth = BTreeSet::new();
        assert!(diagnosis_metrics(&[0.1], &truth).is_err());
    }
}
