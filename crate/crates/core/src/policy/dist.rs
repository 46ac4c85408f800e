use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_softmax, log_sum_exp, pairwise_sum, EXACT_TOL};

/// A normalized distribution over the responses of one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl Distribution {
    /// From probabilities summing to 1 within [`EXACT_TOL`]. Zeros are allowed.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Shape("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Parameter("probabilities must be finite and nonnegative".into()));
        }
        let total = pairwise_sum(&probs);
        if (total - 1.0).abs() > EXACT_TOL {
            return Err(Error::Parameter(format!("probabilities sum to {total}, not 1")));
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Distribution { probs, log_probs })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total = pairwise_sum(weights);
        if !(total > 0.0 && total.is_finite()) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Parameter("weights must be nonnegative with a positive finite sum".into()));
        }
        Self::from_log_weights(&weights.iter().map(|w| w.ln()).collect::<Vec<_>>())
    }

    /// Softmax of arbitrary finite logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Shape("empty distribution".into()));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Parameter("logits must be finite".into()));
        }
        Ok(Self::from_log_probs_unchecked(log_softmax(logits)))
    }

    /// Normalizes unnormalized log-weights (entries may be `-inf`).
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        let lse = log_sum_exp(log_weights);
        if !lse.is_finite() {
            return Err(Error::Parameter("log-weights have no finite normalizer".into()));
        }
        Ok(Self::from_log_probs_unchecked(
            log_weights.iter().map(|l| l - lse).collect(),
        ))
    }

    pub(crate) fn from_log_probs_unchecked(log_probs: Vec<f64>) -> Self {
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        Distribution { probs, log_probs }
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Shape("empty distribution".into()));
        }
        Ok(Self::from_log_probs_unchecked(vec![-(n as f64).ln(); n]))
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.probs.iter().all(|p| *p > 0.0)
    }

    /// Expectation of `values` under this distribution.
    pub fn expectation(&self, values: &[f64]) -> Result<f64> {
        check_same_len(self.len(), values.len())?;
        let terms: Vec<f64> = self
            .probs
            .iter()
            .zip(values)
            .map(|(p, v)| if *p == 0.0 { 0.0 } else { p * v })
            .collect();
        Ok(pairwise_sum(&terms))
    }

    pub fn total_variation(&self, other: &Distribution) -> Result<f64> {
        check_same_len(self.len(), other.len())?;
        let diffs: Vec<f64> = self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).collect();
        Ok(0.5 * pairwise_sum(&diffs))
    }

    pub fn max_abs_diff(&self, other: &Distribution) -> Result<f64> {
        check_same_len(self.len(), other.len())?;
        Ok(self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

pub(crate) fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("length {a} vs {b}")))
    }
}

/// `KL(p || q)` by exact summation. Returns `f64::INFINITY` when `q` vanishes
/// where `p` does not.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    check_same_len(p.len(), q.len())?;
    let mut terms = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let pi = p.probs[i];
        if pi == 0.0 {
            continue;
        }
        if q.probs[i] == 0.0 {
            return Ok(f64::INFINITY);
        }
        terms.push(pi * (p.log_probs[i] - q.log_probs[i]));
    }
    Ok(pairwise_sum(&terms).max(0.0))
}

/// Normalized geometric interpolation `pi0^alpha * pit^(1-alpha) / C`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolatedReference {
    pub dist: Distribution,
    /// `log C`, never positive.
    pub log_c: f64,
}

pub fn interpolated_reference(
    pi0: &Distribution,
    pit: &Distribution,
    alpha: f64,
) -> Result<InterpolatedReference> {
    check_alpha(alpha)?;
    check_same_len(pi0.len(), pit.len())?;
    if !pi0.is_strictly_positive() || !pit.is_strictly_positive() {
        return Err(Error::Parameter("interpolation needs strictly positive distributions".into()));
    }
    if alpha == 0.0 {
        return Ok(InterpolatedReference { dist: pit.clone(), log_c: 0.0 });
    }
    if alpha == 1.0 {
        return Ok(InterpolatedReference { dist: pi0.clone(), log_c: 0.0 });
    }
    let log_u = interpolated_log_weights(pi0, pit, alpha);
    let log_c = log_sum_exp(&log_u);
    let dist = Distribution::from_log_probs_unchecked(log_u.iter().map(|l| l - log_c).collect());
    Ok(InterpolatedReference { dist, log_c: log_c.min(0.0) })
}

/// `alpha * log pi0 + (1 - alpha) * log pit`, elementwise.
pub fn interpolated_log_weights(pi0: &Distribution, pit: &Distribution, alpha: f64) -> Vec<f64> {
    pi0.log_probs
        .iter()
        .zip(&pit.log_probs)
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect()
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(p: &[f64]) -> Distribution {
        Distribution::from_probs(p.to_vec()).unwrap()
    }

    #[test]
    fn kl_hand_values() {
        let p = d(&[0.5, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let v = kl_divergence(&d(&[1.0, 0.0]), &p).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let v = kl_divergence(&p, &d(&[0.75, 0.25])).unwrap();
        assert!((v - (0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln())).abs() < 1e-15);
        assert!((v - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn kl_infinite_when_support_missing() {
        assert_eq!(kl_divergence(&d(&[0.5, 0.5]), &d(&[1.0, 0.0])).unwrap(), f64::INFINITY);
    }

    #[test]
    fn interpolation_hand_example() {
        let r = interpolated_reference(&d(&[0.8, 0.2]), &d(&[0.2, 0.8]), 0.5).unwrap();
        assert!((r.log_c.exp() - 0.8).abs() < 1e-15);
        assert!((r.dist.probs()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let a = d(&[0.3, 0.7]);
        let b = d(&[0.6, 0.4]);
        assert_eq!(interpolated_reference(&a, &b, 1.0).unwrap().dist, a);
        assert_eq!(interpolated_reference(&a, &b, 0.0).unwrap().dist, b);
        let same = interpolated_reference(&a, &a, 0.4).unwrap();
        assert!(same.log_c.abs() < 1e-15);
        assert!(interpolated_reference(&a, &b, 1.5).is_err());
        assert!(interpolated_reference(&a, &b, -0.1).is_err());
    }

    #[test]
    fn from_probs_validates_sum() {
        assert!(Distribution::from_probs(vec![0.5, 0.6]).is_err());
        assert!(Distribution::from_probs(vec![]).is_err());
    }
}
