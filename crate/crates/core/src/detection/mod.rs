//! Anomaly detection primitives: sliding windows over multivariate
//! series, min-max normalization, deviation scoring, extreme-value
//! thresholding and the evaluation metrics used on labeled traces.

pub mod metrics;
pub mod pot;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::VecDeque;

/// Fixed-capacity history of per-entity feature vectors. A window is the
/// last `k` steps laid out per entity as one row of `n * k` values with
/// time fastest, feature-major:
/// `[f0@t-k+1 .. f0@t, f1@t-k+1 .. f1@t, ...]`.
///
/// Before `k` steps have been pushed the earliest observation is
/// replicated backwards, so a buffer with one push yields a window of
/// `k` copies of it.
#[derive(Debug, Clone)]
pub struct SlidingWindowBuffer {
    entities: usize,
    n_features: usize,
    k: usize,
    history: VecDeque<Vec<f64>>,
}

impl SlidingWindowBuffer {
    pub fn new(entities: usize, n_features: usize, k: usize) -> Result<Self> {
        if entities == 0 || n_features == 0 || k == 0 {
            return Err(Error::contract("window buffer dims must all be >= 1"));
        }
        Ok(SlidingWindowBuffer { entities, n_features, k, history: VecDeque::new() })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    /// Push one step of observations, `entities * n_features` values laid
    /// out entity-major.
    pub fn push(&mut self, step: Vec<f64>) -> Result<()> {
        if step.len() != self.entities * self.n_features {
            return Err(Error::shape(
                format!("{} values", self.entities * self.n_features),
                format!("{}", step.len()),
            ));
        }
        self.history.push_back(step);
        while self.history.len() > self.k {
            self.history.pop_front();
        }
        Ok(())
    }

    /// Current window as an (entities, n*k) tensor. Errors if nothing has
    /// been pushed yet.
    pub fn window(&self) -> Result<Tensor> {
        if self.history.is_empty() {
            return Err(Error::contract("window requested from an empty buffer"));
        }
        let mut out = Tensor::zeros(&[self.entities, self.n_features * self.k]);
        for t in 0..self.k {
            // Replicate the earliest step into the missing past.
            let idx = t.saturating_sub(self.k - self.history.len());
            let step = &self.history[idx.min(self.history.len() - 1)];
            for e in 0..self.entities {
                for f in 0..self.n_features {
                    out.set2(e, f * self.k + t, step[e * self.n_features + f]);
                }
            }
        }
        Ok(out)
    }
}

/// Per-feature min-max scaler fit on training data only.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Normalizer {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(|r| r.len()).ok_or_else(|| {
            Error::contract("normalizer needs at least one row")
        })?;
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for row in rows {
            if row.len() != d {
                return Err(Error::shape(format!("{d} features"), format!("{}", row.len())));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::numerical("normalizer: non-finite input"));
                }
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(Normalizer { min, max })
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    /// Scale into [0,1], clamping values outside the fitted range.
    /// Constant features map to 0.5.
    pub fn normalize(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.min.len() {
            return Err(Error::shape(
                format!("{} features", self.min.len()),
                format!("{}", row.len()),
            ));
        }
        Ok(row
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let span = self.max[j] - self.min[j];
                if span <= 0.0 {
                    0.5
                } else {
                    ((v - self.min[j]) / span).clamp(0.0, 1.0)
                }
            })
            .collect())
    }

    pub fn denormalize(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.min.len() {
            return Err(Error::shape(
                format!("{} features", self.min.len()),
                format!("{}", row.len()),
            ));
        }
        Ok(row
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let span = self.max[j] - self.min[j];
                if span <= 0.0 {
                    self.min[j]
                } else {
                    self.min[j] + v * span
                }
            })
            .collect())
    }
}

/// Deviation of the observed window from its reconstruction, counting
/// only where observation exceeds reconstruction: the overall score is
/// the L2 norm of `relu(observed - reconstructed)` and each entity gets
/// the L2 norm of its own row slice.
pub fn fault_score(observed: &Tensor, reconstructed: &Tensor) -> Result<(f64, Vec<f64>)> {
    if observed.shape() != reconstructed.shape() {
        return Err(Error::shape(
            format!("{:?}", observed.shape()),
            format!("{:?}", reconstructed.shape()),
        ));
    }
    let rows = observed.rows();
    let mut per_entity = Vec::with_capacity(rows);
    let mut total_sq = 0.0;
    for i in 0..rows {
        let o = observed.row(i);
        let r = reconstructed.row(i);
        let sq: f64 = o
            .iter()
            .zip(r)
            .map(|(&a, &b)| {
                let d = (a - b).max(0.0);
                d * d
            })
            .sum();
        per_entity.push(sq.sqrt());
        total_sq += sq;
    }
    Ok((total_sq.sqrt(), per_entity))
}

/// Expand each predicted positive to cover the whole contiguous true
/// anomaly segment it falls in. Predictions outside true segments are
/// kept as-is.
pub fn point_adjust(pred: &[bool], truth: &[bool]) -> Result<Vec<bool>> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("{} points", truth.len()), format!("{}", pred.len())));
    }
    let mut adjusted = pred.to_vec();
    let n = truth.len();
    let mut i = 0;
    while i < n {
        if truth[i] {
            let start = i;
            while i < n && truth[i] {
                i += 1;
            }
            if adjusted[start..i].iter().any(|&p| p) {
                for a in &mut adjusted[start..i] {
                    *a = true;
                }
            }
        } else {
            i += 1;
        }
    }
    Ok(adjusted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn window_replicates_earliest_step() {
        let mut buf = SlidingWindowBuffer::new(1, 2, 3).unwrap();
        buf.push(vec![1.0, 10.0]).unwrap();
        let w = buf.window().unwrap();
        // Feature 0 occupies the first k slots, feature 1 the next k.
        assert_eq!(w.data(), &[1.0, 1.0, 1.0, 10.0, 10.0, 10.0]);

        buf.push(vec![2.0, 20.0]).unwrap();
        let w = buf.window().unwrap();
        assert_eq!(w.data(), &[1.0, 1.0, 2.0, 10.0, 10.0, 20.0]);

        buf.push(vec![3.0, 30.0]).unwrap();
        buf.push(vec![4.0, 40.0]).unwrap();
        let w = buf.window().unwrap();
        assert_eq!(w.data(), &[2.0, 3.0, 4.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn empty_window_errors() {
        let buf = SlidingWindowBuffer::new(2, 2, 4).unwrap();
        assert!(buf.window().is_err());
    }

    #[test]
    fn normalizer_roundtrip_within_range() {
        let rows = vec![vec![0.0, 5.0], vec![10.0, 15.0], vec![5.0, 10.0]];
        let norm = Normalizer::fit(&rows).unwrap();
        let x = vec![2.5, 7.5];
        let n = norm.normalize(&x).unwrap();
        assert_abs_diff_eq!(n[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(n[1], 0.25, epsilon = 1e-12);
        let back = norm.denormalize(&n).unwrap();
        assert_abs_diff_eq!(back[0], x[0], epsilon = 1e-12);
        assert_abs_diff_eq!(back[1], x[1], epsilon = 1e-12);
    }

    #[test]
    fn normalizer_clamps_and_handles_constant() {
        let rows = vec![vec![1.0, 3.0], vec![1.0, 7.0]];
        let norm = Normalizer::fit(&rows).unwrap();
        let n = norm.normalize(&[0.0, 100.0]).unwrap();
        assert_eq!(n[0], 0.5);
        assert_eq!(n[1], 1.0);
    }

    #[test]
    fn fault_score_one_sided() {
        let obs = Tensor::matrix(2, 2, vec![0.8, 0.2, 0.5, 0.5]).unwrap();
        let rec = Tensor::matrix(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let (f, per) = fault_score(&obs, &rec).unwrap();
        // Only the 0.8 > 0.5 cell contributes.
        assert_abs_diff_eq!(f, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(per[0], 0.3, epsilon = 1e-12);
        assert_eq!(per[1], 0.0);
    }

    #[test]
    fn fault_score_total_consistent_with_rows() {
        let obs = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64) / 11.0).collect()).unwrap();
        let rec = Tensor::matrix(3, 4, (0..12).map(|i| ((11 - i) as f64) / 11.0).collect())
            .unwrap();
        let (f, per) = fault_score(&obs, &rec).unwrap();
        let sum_sq: f64 = per.iter().map(|v| v * v).sum();
        assert_abs_diff_eq!(f * f, sum_sq, epsilon = 1e-12);
    }

    #[test]
    fn point_adjust_expands_segment() {
        let truth = vec![false, true, true, true, false, true];
        let pred = vec![false, false, true, false, false, false];
        let adj = point_adjust(&pred, &truth).unwrap();
        assert_eq!(adj, vec![false, true, true, true, false, false]);
    }

    #[test]
    fn point_adjust_keeps_false_positives_outside() {
        let truth = vec![false, false, true, true];
        let pred = vec![true, false, false, false];
        let adj = point_adjust(&pred, &truth).unwrap();
        assert_eq!(adj, vec![true, false, false, false]);
    }

    #[test]
    fn point_adjust_never_removes_positives() {
        let truth = vec![true, false, true, true, false];
        let pred = vec![true, true, true, false, true];
        let adj = point_adjust(&pred, &truth).unwrap();
        for (a, p) in adj.iter().zip(&pred) {
            assert!(*a || !*p);
        }
    }
}
