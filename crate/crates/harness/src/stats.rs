//! Across-seed aggregation.

use serde::{Deserialize, Serialize};

/// Normal-approximation quantile for a two-sided 95% interval.
pub const Z_95: f64 = 1.96;

/// Empty groups carry NaN, which JSON stores as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    #[serde(deserialize_with = "nan_if_null")]
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    #[serde(deserialize_with = "nan_if_null")]
    pub std: f64,
    /// Half-width `1.96 std / sqrt(n)`.
    #[serde(deserialize_with = "nan_if_null")]
    pub ci95: f64,
}

fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { n, mean: f64::NAN, std: f64::NAN, ci95: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary { n, mean, std, ci95: Z_95 * std / (n as f64).sqrt() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_summary_round_trips() {
        let text = serde_json::to_string(&summarize(&[])).unwrap();
        let back: Summary = serde_json::from_str(&text).unwrap();
        assert!(back.n == 0 && back.mean.is_nan() && back.ci95.is_nan());
    }

    #[test]
    fn hand_checked_triples() {
        // [1, 2, 3]: mean 2, sample variance 1.
        let s = summarize(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert!((s.ci95 - 1.96 / 3f64.sqrt()).abs() < 1e-15);
        // [2, 4, 9]: mean 5, deviations -3, -1, 4, variance 26 / 2 = 13.
        let s = summarize(&[2.0, 4.0, 9.0]);
        assert!((s.std - 13f64.sqrt()).abs() < 1e-15);
        assert!((s.ci95 - 1.96 * (13f64 / 3.0).sqrt()).abs() < 1e-14);
        let s = summarize(&[0.7]);
        assert_eq!((s.mean, s.ci95), (0.7, 0.0));
    }
}
