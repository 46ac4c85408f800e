//! Reward-versus-KL frontiers from beta sweeps: raw points and a quadratic
//! least-squares fit over them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// One finished run of a beta sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub beta: f64,
    /// Expected true reward of the final policy.
    pub final_reward: f64,
    pub kl_measure: f64,
    pub seed: u64,
}

/// `reward ~ c0 + c1 kl + c2 kl^2` fitted on raw points, each weighted 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    pub coefficients: [f64; 3],
    pub residuals: Vec<f64>,
    pub kl_range: (f64, f64),
    pub peak_kl: f64,
    pub peak_reward: f64,
    /// Smallest KL in range where the fit reaches `peak - 0.05 |peak|`.
    pub kl_at_95: f64,
}

impl Frontier {
    pub fn eval(&self, kl: f64) -> f64 {
        let [c0, c1, c2] = self.coefficients;
        c0 + kl * (c1 + kl * c2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoResult {
    pub points: Vec<ParetoPoint>,
    /// Absent when the KLs do not determine a quadratic.
    pub fit: Option<Frontier>,
}

pub fn pareto(points: Vec<ParetoPoint>) -> ParetoResult {
    let fit = fit_quadratic(&points);
    ParetoResult { points, fit }
}

fn design(points: &[ParetoPoint]) -> (DMatrix<f64>, DVector<f64>) {
    let x = DMatrix::from_fn(points.len(), 3, |i, j| points[i].kl_measure.powi(j as i32));
    let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.final_reward));
    (x, y)
}

/// Least squares through the SVD; `None` when fewer than three distinct KL
/// values exist or the design matrix is numerically rank deficient.
pub fn fit_quadratic(points: &[ParetoPoint]) -> Option<Frontier> {
    if points.len() < 3 || points.iter().any(|p| !p.kl_measure.is_finite() || !p.final_reward.is_finite()) {
        return None;
    }
    let mut kls: Vec<f64> = points.iter().map(|p| p.kl_measure).collect();
    kls.sort_by(f64::total_cmp);
    kls.dedup();
    if kls.len() < 3 {
        return None;
    }
    let (x, y) = design(points);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.rank(smax * 1e-12) < 3 {
        return None;
    }
    let c = svd.solve(&y, smax * 1e-12).ok()?;
    let residuals = (&y - &x * &c).iter().copied().collect();
    let coefficients = [c[0], c[1], c[2]];
    let kl_range = (kls[0], kls[kls.len() - 1]);

    let mut frontier =
        Frontier { coefficients, residuals, kl_range, peak_kl: kl_range.0, peak_reward: f64::NEG_INFINITY, kl_at_95: kl_range.0 };
    let mut candidates = vec![kl_range.0, kl_range.1];
    if coefficients[2] != 0.0 {
        let vertex = -coefficients[1] / (2.0 * coefficients[2]);
        if vertex > kl_range.0 && vertex < kl_range.1 {
            candidates.push(vertex);
        }
    }
    for kl in candidates {
        let r = frontier.eval(kl);
        if r > frontier.peak_reward || (r == frontier.peak_reward && kl < frontier.peak_kl) {
            frontier.peak_reward = r;
            frontier.peak_kl = kl;
        }
    }
    frontier.kl_at_95 = first_crossing(&frontier, frontier.peak_reward - 0.05 * frontier.peak_reward.abs());
    Some(frontier)
}

/// Smallest KL in `[kl_min, peak_kl]` with `fit(kl) >= level`.
fn first_crossing(f: &Frontier, level: f64) -> f64 {
    let (lo, hi) = (f.kl_range.0, f.peak_kl);
    if f.eval(lo) >= level {
        return lo;
    }
    let [c0, c1, c2] = f.coefficients;
    let (a, b, c) = (c2, c1, c0 - level);
    let mut roots = Vec::new();
    if a == 0.0 {
        if b != 0.0 {
            roots.push(-c / b);
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            // Numerically stable pair.
            let q = -0.5 * (b + b.signum() * disc.sqrt());
            roots.push(q / a);
            if q != 0.0 {
                roots.push(c / q);
            }
        }
    }
    roots
        .into_iter()
        .filter(|r| *r >= lo && *r <= hi)
        .fold(hi, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(data: &[(f64, f64)]) -> Vec<ParetoPoint> {
        data.iter().enumerate().map(|(i, &(kl, r))| ParetoPoint { beta: 0.1, final_reward: r, kl_measure: kl, seed: i as u64 }).collect()
    }

    #[test]
    fn exact_parabola_is_recovered() {
        // r = 1 + 2 kl - kl^2, peak at kl = 1 with r = 2.
        let p = pts(&[(0.0, 1.0), (0.5, 1.75), (1.5, 1.75), (2.0, 1.0)]);
        let f = fit_quadratic(&p).unwrap();
        for (got, want) in f.coefficients.iter().zip([1.0, 2.0, -1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((f.peak_kl - 1.0).abs() < 1e-12 && (f.peak_reward - 2.0).abs() < 1e-12);
        // 1 + 2k - k^2 = 1.9 at k = 1 - sqrt(0.1).
        assert!((f.kl_at_95 - (1.0 - 0.1f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn collinear_kls_have_no_fit() {
        assert!(fit_quadratic(&pts(&[(0.3, 1.0), (0.3, 2.0), (0.7, 1.0), (0.7, 0.0)])).is_none());
        assert!(fit_quadratic(&pts(&[(0.3, 1.0), (0.5, 2.0)])).is_none());
    }

    #[test]
    fn monotone_fit_peaks_at_range_end() {
        let f = fit_quadratic(&pts(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)])).unwrap();
        assert!((f.peak_kl - 3.0).abs() < 1e-12);
        assert!((f.kl_at_95 - 2.85).abs() < 1e-9);
    }
}
