use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::EXACT_TOL;

/// Prompt ids `0..n` with their sampling weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    prompts: Vec<usize>,
    weights: Vec<f64>,
}

impl PromptSet {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Parameter("a prompt set needs at least one prompt".into()));
        }
        Ok(PromptSet {
            prompts: (0..n).collect(),
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn with_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Parameter("a prompt set needs at least one prompt".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Parameter("prompt weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > EXACT_TOL {
            return Err(Error::Parameter(format!("prompt weights sum to {total}, not 1")));
        }
        Ok(PromptSet {
            prompts: (0..weights.len()).collect(),
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompts(&self) -> &[usize] {
        &self.prompts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, prompt: usize) -> f64 {
        self.weights[prompt]
    }

    /// Draws one prompt id by inverse CDF.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.weights, rng)
    }
}

/// Inverse-CDF draw from a probability vector; falls back to the last
/// positive entry when rounding leaves the cumulative sum short of `u`.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_weights_sum_to_one() {
        let p = PromptSet::uniform(3).unwrap();
        assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < EXACT_TOL);
        assert!(PromptSet::uniform(0).is_err());
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(PromptSet::with_weights(vec![0.5, 0.6]).is_err());
        assert!(PromptSet::with_weights(vec![-0.5, 1.5]).is_err());
        assert!(PromptSet::with_weights(vec![0.25, 0.75]).is_ok());
    }
}
