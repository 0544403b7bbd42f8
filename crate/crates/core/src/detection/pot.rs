//! Peaks-over-threshold tail fitting for automatic anomaly thresholds.
//!
//! The initial threshold `u` is an empirical quantile; excesses over `u`
//! get a generalized Pareto fit by method of moments, optionally refined
//! by Grimshaw's likelihood trick, and the final threshold is the
//! extrapolated `1 - q_risk` quantile. Small or degenerate samples fall
//! back to a mean + 3 sigma warm-up rule.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

pub const DEFAULT_Q_LOW: f64 = 0.07;
pub const DEFAULT_Q_RISK: f64 = 1e-4;

/// Observations required before tail fitting is attempted.
pub const MIN_OBSERVATIONS: usize = 20;
/// Excesses over `u` required before tail fitting is attempted.
pub const MIN_EXCESSES: usize = 5;

/// Shape parameters this close to zero use the exponential-tail limit
/// of the quantile formula.
const GAMMA_ZERO_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotState {
    pub u: f64,
    pub gamma_hat: f64,
    pub sigma_hat: f64,
    pub n_total: usize,
    pub n_excess: usize,
    pub q_low: f64,
    pub q_risk: f64,
    threshold: f64,
    /// True while the warm-up rule (mean + 3 sigma) is in force.
    pub warmup: bool,
}

impl PotState {
    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

/// Label rule: anomalous iff the score reaches the fitted threshold.
pub fn label(f: f64, pot: &PotState) -> bool {
    f >= pot.threshold()
}

/// Empirical quantile at level `q` (nearest-rank, upper).
fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fit the threshold state from a score history.
pub fn pot_fit(scores: &[f64], q_low: f64, q_risk: f64) -> Result<PotState> {
    pot_fit_with(scores, q_low, q_risk, false)
}

/// As [`pot_fit`], optionally refining the moment fit with Grimshaw's
/// maximum-likelihood estimate.
pub fn pot_fit_with(scores: &[f64], q_low: f64, q_risk: f64, refine: bool) -> Result<PotState> {
    if scores.is_empty() {
        return Err(Error::contract("pot_fit needs at least one score"));
    }
    if !(0.0..1.0).contains(&q_low) || q_low <= 0.0 {
        return Err(Error::contract(format!("q_low must be in (0,1), got {q_low}")));
    }
    if !(0.0..1.0).contains(&q_risk) || q_risk <= 0.0 {
        return Err(Error::contract(format!("q_risk must be in (0,1), got {q_risk}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numerical("pot_fit: non-finite score"));
    }

    let n_total = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let u = empirical_quantile(&sorted, 1.0 - q_low);
    let excesses: Vec<f64> = sorted.iter().filter(|&&s| s > u).map(|&s| s - u).collect();
    let n_excess = excesses.len();

    if n_total < MIN_OBSERVATIONS || n_excess < MIN_EXCESSES {
        let (mean, std) = mean_std(scores);
        return Ok(PotState {
            u,
            gamma_hat: 0.0,
            sigma_hat: std.max(f64::MIN_POSITIVE),
            n_total,
            n_excess,
            q_low,
            q_risk,
            threshold: mean + 3.0 * std,
            warmup: true,
        });
    }

    let (y_mean, y_std) = mean_std(&excesses);
    let (mut gamma, mut sigma) = if y_std <= 0.0 {
        // All excesses equal: exponential tail.
        (0.0, y_mean)
    } else {
        let r = (y_mean * y_mean) / (y_std * y_std);
        (0.5 * (1.0 - r), 0.5 * y_mean * (r + 1.0))
    };
    if refine && y_std > 0.0 {
        if let Some((g, s)) = grimshaw(&excesses, gamma, sigma) {
            gamma = g;
            sigma = s;
        }
    }
    sigma = sigma.max(f64::MIN_POSITIVE);

    let ratio = q_risk * n_total as f64 / n_excess as f64;
    let threshold = if gamma.abs() < GAMMA_ZERO_EPS {
        u + sigma * (n_excess as f64 / (q_risk * n_total as f64)).ln()
    } else {
        u + (sigma / gamma) * (ratio.powf(-gamma) - 1.0)
    };
    if !threshold.is_finite() {
        return Err(Error::numerical("pot_fit: non-finite threshold"));
    }
    Ok(PotState {
        u,
        gamma_hat: gamma,
        sigma_hat: sigma,
        n_total,
        n_excess,
        q_low,
        q_risk,
        threshold,
        warmup: false,
    })
}

/// Grimshaw's reduction of the GPD likelihood to a one-dimensional root
/// search in theta = gamma/sigma. Returns the candidate with the best
/// log-likelihood, or None if no root beats the moment fit.
fn grimshaw(y: &[f64], mom_gamma: f64, mom_sigma: f64) -> Option<(f64, f64)> {
    let n = y.len() as f64;
    let y_max = y.iter().cloned().fold(0.0_f64, f64::max);
    let y_mean = y.iter().sum::<f64>() / n;
    if y_max <= 0.0 {
        return None;
    }

    let w = |theta: f64| -> f64 {
        let mut u = 0.0;
        let mut v = 0.0;
        for &yi in y {
            let a = 1.0 + theta * yi;
            u += 1.0 / a;
            v += a.ln();
        }
        u /= n;
        v = 1.0 + v / n;
        u * v - 1.0
    };
    let solve = |mut lo: f64, mut hi: f64| -> Option<f64> {
        let (flo, fhi) = (w(lo), w(hi));
        if flo == 0.0 {
            return Some(lo);
        }
        if fhi == 0.0 {
            return Some(hi);
        }
        if flo.signum() == fhi.signum() {
            return None;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let fm = w(mid);
            if fm == 0.0 {
                return Some(mid);
            }
            if fm.signum() == flo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    };

    let log_lik = |gamma: f64, sigma: f64| -> f64 {
        if sigma <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if gamma.abs() < GAMMA_ZERO_EPS {
            -n * sigma.ln() - y.iter().sum::<f64>() / sigma
        } else {
            let mut ll = -n * sigma.ln();
            for &yi in y {
                let a = 1.0 + gamma * yi / sigma;
                if a <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                ll -= (1.0 + 1.0 / gamma) * a.ln();
            }
            ll
        }
    };

    let eps = 1e-8 / y_max;
    let mut candidates = vec![(mom_gamma, mom_sigma), (0.0, y_mean)];
    // Root brackets on each side of zero; theta is bounded below by
    // -1/y_max for the likelihood to exist.
    let brackets = [
        (-1.0 / y_max + eps, -eps),
        (eps, 2.0 / y_mean),
    ];
    for (lo, hi) in brackets {
        if lo < hi {
            if let Some(theta) = solve(lo, hi) {
                if theta.abs() > 1e-12 {
                    let gamma = {
                        let mut v = 0.0;
                        for &yi in y {
                            v += (1.0 + theta * yi).ln();
                        }
                        v / n
                    };
                    let sigma = gamma / theta;
                    candidates.push((gamma, sigma));
                }
            }
        }
    }
    candidates
        .into_iter()
        .max_by(|a, b| {
            log_lik(a.0, a.1)
                .partial_cmp(&log_lik(b.0, b.1))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .filter(|&(_, s)| s > 0.0)
}

/// Streaming wrapper: keeps the most recent scores (bounded) and refits
/// on demand. One instance per broker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpotDetector {
    q_low: f64,
    q_risk: f64,
    capacity: usize,
    refine: bool,
    scores: VecDeque<f64>,
    state: Option<PotState>,
}

impl SpotDetector {
    pub fn new(q_low: f64, q_risk: f64, capacity: usize, refine: bool) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::contract("spot capacity must be >= 1"));
        }
        Ok(SpotDetector { q_low, q_risk, capacity, refine, scores: VecDeque::new(), state: None })
    }

    pub fn with_defaults() -> Self {
        SpotDetector::new(DEFAULT_Q_LOW, DEFAULT_Q_RISK, 500, false).expect("valid defaults")
    }

    /// Record a score and refit. Returns the refreshed state.
    pub fn observe(&mut self, score: f64) -> Result<&PotState> {
        if !score.is_finite() {
            return Err(Error::numerical("spot observe: non-finite score"));
        }
        self.scores.push_back(score);
        while self.scores.len() > self.capacity {
            self.scores.pop_front();
        }
        let history: Vec<f64> = self.scores.iter().copied().collect();
        self.state = Some(pot_fit_with(&history, self.q_low, self.q_risk, self.refine)?);
        Ok(self.state.as_ref().expect("just set"))
    }

    pub fn state(&self) -> Option<&PotState> {
        self.state.as_ref()
    }

    pub fn threshold(&self) -> Option<f64> {
        self.state.as_ref().map(|s| s.threshold())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, Exp};

    #[test]
    fn exponential_tail_quantile_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let exp = Exp::new(1.0).unwrap();
        let scores: Vec<f64> = (0..10_000).map(|_| exp.sample(&mut rng)).collect();
        let st = pot_fit(&scores, DEFAULT_Q_LOW, DEFAULT_Q_RISK).unwrap();
        let analytic = -(DEFAULT_Q_RISK).ln();
        assert!(
            (st.threshold() - analytic).abs() / analytic < 0.10,
            "threshold {} vs analytic {analytic}",
            st.threshold()
        );
        assert!(!st.warmup);
        assert!(st.threshold() >= st.u);
    }

    #[test]
    fn all_equal_scores_collapse() {
        let scores = vec![2.0; 50];
        let st = pot_fit(&scores, DEFAULT_Q_LOW, DEFAULT_Q_RISK).unwrap();
        assert_eq!(st.u, 2.0);
        assert_eq!(st.threshold(), 2.0);
    }

    #[test]
    fn risk_equal_to_excess_fraction_is_fixed_point() {
        // Uniform scores, q_risk chosen as n_excess/n_total after the fit.
        let scores: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let probe = pot_fit(&scores, DEFAULT_Q_LOW, 0.5).unwrap();
        let q_risk = probe.n_excess as f64 / probe.n_total as f64;
        let st = pot_fit(&scores, DEFAULT_Q_LOW, q_risk).unwrap();
        assert_abs_diff_eq!(st.threshold(), st.u, epsilon = 1e-9);
    }

    #[test]
    fn warmup_below_minimum_observations() {
        let scores = vec![1.0, 2.0, 3.0, 4.0];
        let st = pot_fit(&scores, DEFAULT_Q_LOW, DEFAULT_Q_RISK).unwrap();
        assert!(st.warmup);
        let (mean, std) = mean_std(&scores);
        assert_abs_diff_eq!(st.threshold(), mean + 3.0 * std, epsilon = 1e-12);
    }

    #[test]
    fn label_boundary_inclusive() {
        let st = pot_fit(&vec![1.0; 30], DEFAULT_Q_LOW, DEFAULT_Q_RISK).unwrap();
        assert!(label(st.threshold(), &st));
        assert!(!label(st.threshold() - 1e-9, &st));
    }

    #[test]
    fn grimshaw_refinement_stays_near_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let exp = Exp::new(1.0).unwrap();
        let scores: Vec<f64> = (0..10_000).map(|_| exp.sample(&mut rng)).collect();
        let st = pot_fit_with(&scores, DEFAULT_Q_LOW, DEFAULT_Q_RISK, true).unwrap();
        let analytic = -(DEFAULT_Q_RISK).ln();
        assert!(
            (st.threshold() - analytic).abs() / analytic < 0.10,
            "refined threshold {} vs analytic {analytic}",
            st.threshold()
        );
    }

    #[test]
    fn spot_detector_keeps_bounded_history() {
        let mut det = SpotDetector::new(DEFAULT_Q_LOW, DEFAULT_Q_RISK, 100, false).unwrap();
        for i in 0..500 {
            det.observe(i as f64 * 0.01).unwrap();
        }
        assert_eq!(det.scores.len(), 100);
        assert!(det.threshold().unwrap() > 0.0);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(pot_fit(&[], 0.07, 1e-4).is_err());
        assert!(pot_fit(&[1.0], 0.0, 1e-4).is_err());
        assert!(pot_fit(&[1.0], 0.07, 1.5).is_err());
        assert!(pot_fit(&[f64::NAN], 0.07, 1e-4).is_err());
    }
}
