//! Log-space arithmetic and the repo-wide tolerance constants.

/// Tolerance for quantities that are exact up to floating-point rounding
/// (normalization, endpoint reductions, partition consistency).
pub const EXACT_TOL: f64 = 1e-12;

/// Tolerance for algebraic identities evaluated through several routes.
pub const IDENTITY_TOL: f64 = 1e-10;

/// `log(sum(exp(xs)))`, stable for large magnitudes and `-inf` entries.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Log-softmax of a logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&l| l - lse).collect()
}

/// Softmax of a logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&l| (l - lse).exp()).collect()
}

/// Pairwise summation. Order-deterministic and with O(log n) error growth.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Arithmetic mean; `NaN` for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Population (1/N) standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    let mu = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|&x| (x - mu) * (x - mu)).collect();
    (pairwise_sum(&sq) / xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let big = log_sum_exp(&[1000.0, 1000.0]);
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[0.0, f64::NEG_INFINITY])).abs() < 1e-15);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[0.0, 3f64.ln()]);
        assert!((p[1] - 0.75).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < EXACT_TOL);
    }

    #[test]
    fn pairwise_matches_naive_on_small_inputs() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&xs), 249_750.0);
        assert!((population_std(&[-1.0, 1.0]) - 1.0).abs() < 1e-15);
    }
}
