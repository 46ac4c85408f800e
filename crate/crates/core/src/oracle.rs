//! Exact objectives, the closed-form dual-KL optimum, and independent oracles
//! (mirror ascent, central differences) used to validate the rest of the crate.

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::policy::{check_alpha, check_same_len, interpolated_log_weights, kl_divergence, Distribution};

/// Default iteration budget for [`brute_force_optimal`].
pub const BRUTE_FORCE_BUDGET: usize = 50_000;
const BRUTE_FORCE_STEP: f64 = 0.1;
/// Largest response space the brute-force oracle accepts.
pub const BRUTE_FORCE_MAX_RESPONSES: usize = 512;

/// `A(x, y) = r(x, y) - V(x)` for every prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageTable {
    pub values: Vec<Vec<f64>>,
    pub baseline: Vec<f64>,
}

impl AdvantageTable {
    /// Advantages against the exact baseline `V(x) = sum_y pit(y|x) r(x, y)`.
    pub fn exact(pit: &[Distribution], rewards: &[Vec<f64>]) -> Result<Self> {
        check_same_len(pit.len(), rewards.len())?;
        let mut values = Vec::with_capacity(pit.len());
        let mut baseline = Vec::with_capacity(pit.len());
        for (d, r) in pit.iter().zip(rewards) {
            let (a, v) = exact_advantage(d, r)?;
            values.push(a);
            baseline.push(v);
        }
        Ok(AdvantageTable { values, baseline })
    }
}

/// Advantages of one prompt and the baseline used.
pub fn exact_advantage(pit: &Distribution, reward: &[f64]) -> Result<(Vec<f64>, f64)> {
    let v = pit.expectation(reward)?;
    Ok((reward.iter().map(|r| r - v).collect(), v))
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("beta must be positive and finite, got {beta}")))
    }
}

/// `E_pi[r] - beta * KL(pi || ref)`.
pub fn rlhf_objective(pi: &Distribution, reference: &Distribution, reward: &[f64], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    check_same_len(pi.len(), reference.len())?;
    Ok(pi.expectation(reward)? - beta * kl_divergence(pi, reference)?)
}

/// `E_pi[A] - beta * (alpha KL(pi || pi0) + (1 - alpha) KL(pi || pit))`.
pub fn dual_kl_objective(
    pi: &Distribution,
    pi0: &Distribution,
    pit: &Distribution,
    adv: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    check_beta(beta)?;
    check_same_len(pi.len(), pi0.len())?;
    check_same_len(pi.len(), pit.len())?;
    let penalty = if alpha == 1.0 {
        kl_divergence(pi, pi0)?
    } else if alpha == 0.0 {
        kl_divergence(pi, pit)?
    } else {
        alpha * kl_divergence(pi, pi0)? + (1.0 - alpha) * kl_divergence(pi, pit)?
    };
    Ok(pi.expectation(adv)? - beta * penalty)
}

/// `pi*(y) = pi0^alpha pit^(1-alpha) exp(A / beta) / Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormSolution {
    pub dist: Distribution,
    pub log_z: f64,
}

pub fn closed_form_optimal(
    pi0: &Distribution,
    pit: &Distribution,
    adv: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<ClosedFormSolution> {
    check_alpha(alpha)?;
    check_beta(beta)?;
    check_same_len(pi0.len(), pit.len())?;
    check_same_len(pi0.len(), adv.len())?;
    if !pi0.is_strictly_positive() || !pit.is_strictly_positive() {
        return Err(Error::Parameter("pi0 and pit must be strictly positive".into()));
    }
    if adv.iter().any(|a| !a.is_finite()) {
        return Err(Error::Parameter("advantages must be finite".into()));
    }
    let log_u: Vec<f64> = interpolated_log_weights(pi0, pit, alpha)
        .into_iter()
        .zip(adv)
        .map(|(l, a)| l + a / beta)
        .collect();
    let log_z = log_sum_exp(&log_u);
    let dist = Distribution::from_log_weights(&log_u)?;
    Ok(ClosedFormSolution { dist, log_z })
}

/// `pi_inf(y) ∝ pi0(y) exp(r(y) / (alpha beta))`, the distribution left
/// unchanged by the dual-KL update when `pit` equals it.
pub fn fixed_point_policy(pi0: &Distribution, reward: &[f64], alpha: f64, beta: f64) -> Result<Distribution> {
    check_alpha(alpha)?;
    check_beta(beta)?;
    if alpha == 0.0 {
        return Err(Error::Parameter("the fixed point is undefined at alpha = 0".into()));
    }
    check_same_len(pi0.len(), reward.len())?;
    let log_u: Vec<f64> = pi0
        .log_probs()
        .iter()
        .zip(reward)
        .map(|(l, r)| l + r / (alpha * beta))
        .collect();
    Distribution::from_log_weights(&log_u)
}

/// Maximizes [`dual_kl_objective`] over the simplex by exponentiated-gradient
/// ascent from the uniform distribution. A step that lowers the objective is
/// retried at half the step size.
pub fn brute_force_optimal(
    pi0: &Distribution,
    pit: &Distribution,
    adv: &[f64],
    alpha: f64,
    beta: f64,
    budget: usize,
) -> Result<Distribution> {
    check_alpha(alpha)?;
    check_beta(beta)?;
    check_same_len(pi0.len(), pit.len())?;
    check_same_len(pi0.len(), adv.len())?;
    let n = pi0.len();
    if n > BRUTE_FORCE_MAX_RESPONSES {
        return Err(Error::Parameter(format!(
            "brute force is limited to {BRUTE_FORCE_MAX_RESPONSES} responses, got {n}"
        )));
    }
    let log_ref = interpolated_log_weights(pi0, pit, alpha);
    let objective = |q: &Distribution| dual_kl_objective(q, pi0, pit, adv, alpha, beta);

    let mut q = Distribution::uniform(n)?;
    let mut value = objective(&q)?;
    let mut step = BRUTE_FORCE_STEP;
    let mut history: Vec<f64> = Vec::with_capacity(budget.min(1024));
    for _ in 0..budget {
        // d/dq of the objective, up to a constant that the normalization absorbs.
        let grad: Vec<f64> = (0..n)
            .map(|i| adv[i] - beta * (q.log_probs()[i] - log_ref[i]))
            .collect();
        let mut accepted = false;
        for _ in 0..60 {
            let log_w: Vec<f64> = q.log_probs().iter().zip(&grad).map(|(l, g)| l + step * g).collect();
            let candidate = Distribution::from_log_weights(&log_w)?;
            let cv = objective(&candidate)?;
            if cv >= value - 1e-15 * value.abs().max(1.0) {
                let moved = q.max_abs_diff(&candidate)?;
                q = candidate;
                value = cv;
                accepted = true;
                if moved == 0.0 {
                    return Ok(q);
                }
                break;
            }
            step *= 0.5;
        }
        if history.len() == 1024 {
            history.remove(0);
        }
        history.push(value);
        if !accepted {
            break;
        }
    }
    let tail = &history[history.len().saturating_sub(10)..];
    let spread = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - tail.iter().copied().fold(f64::INFINITY, f64::min);
    if spread > 1e-9 {
        return Err(Error::NonConvergence {
            iterations: budget,
            reason: format!("objective still moving by {spread:e} over the last iterations"),
            trace: history,
        });
    }
    Ok(q)
}

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::Parameter("finite-difference step must be positive".into()));
    }
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        x[i] = theta[i] + step;
        let up = f(&x);
        x[i] = theta[i] - step;
        let down = f(&x);
        x[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation(format!("non-finite function value perturbing coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// `max |a - b| / max(max |a|, max |b|)`, or the absolute error when both are
/// below `floor`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    diff / scale.max(floor)
}


#[cfg(test)]
mod tests {
    use super::*;

    fn d(p: &[f64]) -> Distribution {
        Distribution::from_probs(p.to_vec()).unwrap()
    }

    #[test]
    fn rlhf_hand_value() {
        let v = rlhf_objective(&d(&[1.0, 0.0]), &d(&[0.5, 0.5]), &[1.0, 0.0], 1.0).unwrap();
        assert!((v - (1.0 - 2f64.ln())).abs() < 1e-15);
        let p = d(&[0.3, 0.7]);
        assert!((rlhf_objective(&p, &p, &[2.0, 2.0], 0.7).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn closed_form_hand_value() {
        let u = d(&[0.5, 0.5]);
        let s = closed_form_optimal(&u, &u, &[3f64.ln(), 0.0], 0.5, 1.0).unwrap();
        assert!((s.dist.probs()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_hand_value() {
        let (a, b) = (0.1, 0.05);
        let p = fixed_point_policy(&d(&[0.5, 0.5]), &[a * b * 9f64.ln(), 0.0], a, b).unwrap();
        assert!((p.probs()[0] - 0.9).abs() < 1e-14);
        assert!(fixed_point_policy(&d(&[0.5, 0.5]), &[0.0, 0.0], 0.0, b).is_err());
    }

    #[test]
    fn brute_force_hand_values() {
        let u = d(&[0.5, 0.5]);
        let q = brute_force_optimal(&u, &u, &[3f64.ln(), 0.0], 0.3, 1.0, BRUTE_FORCE_BUDGET).unwrap();
        assert!((q.probs()[0] - 0.75).abs() < 1e-4);
        let q = brute_force_optimal(&d(&[0.8, 0.2]), &d(&[0.2, 0.8]), &[0.0, 0.0], 0.5, 1.0, BRUTE_FORCE_BUDGET)
            .unwrap();
        assert!((q.probs()[0] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn finite_differences_of_simple_functions() {
        let g = finite_diff_grad(|t| t.iter().map(|x| x * x).sum(), &[1.0, -2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] + 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 3.0, &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(matches!(
            finite_diff_grad(|t| if t[1] > 2.0 { f64::NAN } else { 0.0 }, &[0.0, 2.0], 1e-3),
            Err(Error::Evaluation(msg)) if msg.contains("coordinate 1")
        ));
    }
}
