//! Dual-regularized advantage regression: K-shot Monte-Carlo advantages,
//! pooled batch normalization, clipped regularization × advantage weights and
//! a weighted log-likelihood step, with `pit` reset to the new policy after
//! every step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{distributions, RewardChannel, Task};
use crate::error::{Error, Result};
use crate::numeric::{mean, pairwise_sum, population_std};
use crate::policy::{Distribution, PolicyEval, PromptSet, TabularPolicy};
use crate::trace::{Trace, TrainOutcome};
use crate::train::{
    apply_step, check_loss, sample_groups, weighted_nll_and_grad, Metrics, NoObserver, StepObserver,
};

/// How the pooled batch of raw advantages is standardized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `(A - mean) / max(std, eps)`.
    #[default]
    Full,
    /// `A / max(std, eps)`, skipping the re-centering.
    ScaleOnly,
    /// Raw advantages.
    Off,
}

/// Where the expectation over responses comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Estimation {
    /// K-shot Monte-Carlo samples from `pit`.
    #[default]
    Sampled,
    /// Every response weighted by `pit`, with exact advantages `r - V^pit`
    /// and no batch normalization.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegConfig {
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    pub w_clip: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_prompts: usize,
    pub norm_epsilon: f64,
    pub normalization: Normalization,
    pub updates_per_batch: usize,
    pub estimation: Estimation,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            alpha: 0.1,
            beta: 0.05,
            k: 4,
            w_clip: 20.0,
            learning_rate: 0.05,
            steps: 500,
            batch_prompts: 4,
            norm_epsilon: 1e-8,
            normalization: Normalization::Full,
            updates_per_batch: 1,
            estimation: Estimation::Sampled,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive and finite");
        }
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if !(self.w_clip > 0.0) {
            return bad("w_clip must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive and finite");
        }
        if self.batch_prompts == 0 {
            return bad("batch_prompts must be >= 1");
        }
        if !(self.norm_epsilon > 0.0) {
            return bad("norm_epsilon must be positive");
        }
        if self.updates_per_batch == 0 {
            return bad("updates_per_batch must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub prompt: usize,
    pub response: usize,
    pub reward: f64,
    pub log_pi0: f64,
    pub log_pit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub samples: Vec<Sample>,
    pub raw_adv: Vec<f64>,
    pub mu_a: f64,
    pub sigma_a: f64,
    pub norm_adv: Vec<f64>,
}

/// Subtracts the group mean, the sample's own reward included.
pub fn mc_advantage(group: &[f64]) -> Vec<f64> {
    let mu = mean(group);
    group.iter().map(|r| r - mu).collect()
}

/// [`mc_advantage`] over consecutive groups of `k` rewards.
pub fn mc_advantages(rewards: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || !rewards.len().is_multiple_of(k) {
        return Err(Error::Shape(format!("{} rewards do not split into groups of {k}", rewards.len())));
    }
    Ok(rewards.chunks(k).flat_map(mc_advantage).collect())
}

/// `(A - mu) / max(sigma, eps)` with pooled mean and population std.
pub fn normalize_batch(raw_adv: &[f64], norm_epsilon: f64) -> Result<(Vec<f64>, f64, f64)> {
    normalize_batch_with(raw_adv, norm_epsilon, Normalization::Full)
}

pub fn normalize_batch_with(raw_adv: &[f64], norm_epsilon: f64, mode: Normalization) -> Result<(Vec<f64>, f64, f64)> {
    if raw_adv.is_empty() {
        return Err(Error::Shape("cannot normalize an empty batch".into()));
    }
    let mu = mean(raw_adv);
    let sigma = population_std(raw_adv);
    let scale = sigma.max(norm_epsilon);
    let out = match mode {
        Normalization::Full => raw_adv.iter().map(|a| (a - mu) / scale).collect(),
        Normalization::ScaleOnly => raw_adv.iter().map(|a| a / scale).collect(),
        Normalization::Off => raw_adv.to_vec(),
    };
    Ok((out, mu, sigma))
}

/// Log of the unclipped weight from log-probabilities and an advantage.
pub type LogWeightFn = fn(alpha: f64, beta: f64, log_pi0: f64, log_pit: f64, adv: f64) -> f64;

/// `alpha (log pi0 - log pit) + A / beta`.
pub fn dar_log_weight(alpha: f64, beta: f64, log_pi0: f64, log_pit: f64, adv: f64) -> f64 {
    let reg = if alpha == 0.0 { 0.0 } else { alpha * (log_pi0 - log_pit) };
    reg + adv / beta
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeights {
    pub w_reg: Vec<f64>,
    pub w_adv: Vec<f64>,
    pub w_final: Vec<f64>,
    /// Whether `w_reg * w_adv` exceeded the clip.
    pub clipped: Vec<bool>,
}

pub fn sample_weights(samples: &[Sample], norm_adv: &[f64], alpha: f64, beta: f64, w_clip: f64) -> Result<SampleWeights> {
    sample_weights_with(samples, norm_adv, alpha, beta, w_clip, dar_log_weight)
}

/// As [`sample_weights`] with a replaceable log-weight rule.
pub fn sample_weights_with(
    samples: &[Sample],
    norm_adv: &[f64],
    alpha: f64,
    beta: f64,
    w_clip: f64,
    log_weight: LogWeightFn,
) -> Result<SampleWeights> {
    if samples.len() != norm_adv.len() {
        return Err(Error::Shape("one normalized advantage per sample required".into()));
    }
    let log_clip = w_clip.ln();
    let n = samples.len();
    let mut w = SampleWeights {
        w_reg: Vec::with_capacity(n),
        w_adv: Vec::with_capacity(n),
        w_final: Vec::with_capacity(n),
        clipped: Vec::with_capacity(n),
    };
    for (s, &a) in samples.iter().zip(norm_adv) {
        if !s.log_pi0.is_finite() || !s.log_pit.is_finite() {
            return Err(Error::Evaluation("sample log-probability is not finite".into()));
        }
        let log_reg = log_weight(alpha, beta, s.log_pi0, s.log_pit, 0.0);
        let log_total = log_weight(alpha, beta, s.log_pi0, s.log_pit, a);
        w.w_reg.push(log_reg.exp());
        w.w_adv.push((log_total - log_reg).exp());
        w.clipped.push(log_total > log_clip);
        w.w_final.push(log_total.min(log_clip).exp().max(f64::MIN_POSITIVE));
    }
    Ok(w)
}

/// `-(1/N) sum w_i log pi_theta(y_i|x_i)` and its gradient, weights held fixed.
pub fn dar_loss_and_grad(pitheta: &TabularPolicy, samples: &[(usize, usize)], w_final: &[f64]) -> Result<(f64, Vec<f64>)> {
    if samples.len() != w_final.len() || samples.is_empty() {
        return Err(Error::Shape("one weight per sample and at least one sample required".into()));
    }
    for &(x, y) in samples {
        pitheta.check_prompt(x)?;
        pitheta.check_response(y)?;
    }
    if pitheta.logits().iter().any(|l| !l.is_finite()) {
        return Err(Error::Evaluation("policy logits are not finite".into()));
    }
    let n = samples.len() as f64;
    let items: Vec<(usize, usize, f64)> = samples.iter().zip(w_final).map(|(&(x, y), &w)| (x, y, w / n)).collect();
    let (loss, grad) = weighted_nll_and_grad(&pitheta.eval(), &items);
    if !loss.is_finite() {
        return Err(Error::Evaluation(format!("non-finite loss {loss}")));
    }
    Ok((loss, grad))
}

/// Per-response weights of exact mode: `min(exp(log_weight(...)), w_clip)`
/// with `A = r - V^pit`. `None` disables the clip.
pub fn exact_weights(
    pi0: &[Distribution],
    pit: &[Distribution],
    rewards: &[Vec<f64>],
    alpha: f64,
    beta: f64,
    w_clip: Option<f64>,
    log_weight: LogWeightFn,
) -> Result<Vec<Vec<f64>>> {
    let log_clip = w_clip.map_or(f64::INFINITY, f64::ln);
    pit.iter()
        .enumerate()
        .map(|(x, d)| {
            let v = d.expectation(&rewards[x])?;
            Ok((0..d.len())
                .map(|y| {
                    let lw = log_weight(alpha, beta, pi0[x].log_probs()[y], d.log_probs()[y], rewards[x][y] - v);
                    lw.min(log_clip).exp().max(f64::MIN_POSITIVE)
                })
                .collect())
        })
        .collect()
}

/// Exact-mode loss `-sum_x w(x) sum_y pit(y|x) w(x,y) log pi_theta(y|x)` and gradient.
pub fn exact_dar_loss_and_grad(
    pitheta: &PolicyEval<'_>,
    pit: &[Distribution],
    weights: &[Vec<f64>],
    prompts: &PromptSet,
) -> (f64, Vec<f64>) {
    let mut items = Vec::new();
    for (x, d) in pit.iter().enumerate() {
        for (y, (&p, &w)) in d.probs().iter().zip(&weights[x]).enumerate() {
            items.push((x, y, prompts.weight(x) * p * w));
        }
    }
    weighted_nll_and_grad(pitheta, &items)
}

pub fn dar_train(task: &Task, config: &RegConfig, seed: u64) -> Result<TrainOutcome> {
    dar_train_observed(task, config, seed, &mut NoObserver)
}

pub fn dar_train_observed(
    task: &Task,
    config: &RegConfig,
    seed: u64,
    observer: &mut dyn StepObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let metrics = Metrics::new(task);
    let pi0_eval = task.pi0.eval();
    let mut policy = task.pi0.clone();
    let mut pit = policy.clone();
    let mut trace = Trace::new("dar");

    for step in 1..=config.steps {
        pit = policy.clone();
        let pit_eval = pit.eval();
        let pit_dists = distributions(&pit_eval, task.n_prompts());
        let (loss, mean_w, clip_fraction) = match config.estimation {
            Estimation::Sampled => {
                let batch = build_batch(task, &pit_eval, &pi0_eval, config, &mut rng)?;
                let w = sample_weights(&batch.samples, &batch.norm_adv, config.alpha, config.beta, config.w_clip)?;
                let pairs: Vec<(usize, usize)> = batch.samples.iter().map(|s| (s.prompt, s.response)).collect();
                let mut loss = 0.0;
                for _ in 0..config.updates_per_batch {
                    let (l, grad) = dar_loss_and_grad(&policy, &pairs, &w.w_final)
                        .map_err(|e| crate::train::aborted(step, e.to_string(), &trace))?;
                    check_loss(l, step, &trace)?;
                    apply_step(&mut policy, &grad, -config.learning_rate, step, &trace)?;
                    loss = l;
                }
                let clipped = w.clipped.iter().filter(|c| **c).count() as f64;
                (loss, mean(&w.w_final), clipped / w.clipped.len() as f64)
            }
            Estimation::Exact => {
                let rewards = task.rewards.channel(RewardChannel::Proxy);
                let weights = exact_weights(
                    metrics.pi0(),
                    &pit_dists,
                    rewards,
                    config.alpha,
                    config.beta,
                    Some(config.w_clip),
                    dar_log_weight,
                )?;
                let mut loss = 0.0;
                for _ in 0..config.updates_per_batch {
                    let (l, grad) = exact_dar_loss_and_grad(&policy.eval(), &pit_dists, &weights, &task.prompts);
                    check_loss(l, step, &trace)?;
                    apply_step(&mut policy, &grad, -config.learning_rate, step, &trace)?;
                    loss = l;
                }
                let mut mean_terms = Vec::new();
                let mut clip_terms = Vec::new();
                for (x, d) in pit_dists.iter().enumerate() {
                    for (y, &p) in d.probs().iter().enumerate() {
                        let mass = task.prompts.weight(x) * p;
                        mean_terms.push(mass * weights[x][y]);
                        if weights[x][y] >= config.w_clip {
                            clip_terms.push(mass);
                        }
                    }
                }
                (loss, pairwise_sum(&mean_terms), pairwise_sum(&clip_terms))
            }
        };
        trace.push(metrics.record(step, &policy, &pit_dists, mean_w, clip_fraction, loss)?);
        observer.observe(step, &policy)?;
    }
    Ok(TrainOutcome { trace, final_policy: policy, last_pit: pit })
}

/// Samples one batch from `pit` and runs the advantage pipeline on the proxy reward.
pub fn build_batch(
    task: &Task,
    pit: &PolicyEval<'_>,
    pi0: &PolicyEval<'_>,
    config: &RegConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdvantageBatch> {
    let groups = sample_groups(pit, &task.prompts, config.batch_prompts, config.k, rng);
    let mut samples = Vec::with_capacity(config.batch_prompts * config.k);
    for g in &groups {
        for &y in &g.responses {
            samples.push(Sample {
                prompt: g.prompt,
                response: y,
                reward: task.rewards.reward(RewardChannel::Proxy, g.prompt, y),
                log_pi0: pi0.log_prob(g.prompt, y),
                log_pit: pit.log_prob(g.prompt, y),
            });
        }
    }
    let rewards: Vec<f64> = samples.iter().map(|s| s.reward).collect();
    let raw_adv = mc_advantages(&rewards, config.k)?;
    let (norm_adv, mu_a, sigma_a) = normalize_batch_with(&raw_adv, config.norm_epsilon, config.normalization)?;
    Ok(AdvantageBatch { samples, raw_adv, mu_a, sigma_a, norm_adv })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mc_advantage_hand_values() {
        assert_eq!(mc_advantage(&[1.0, 2.0, 3.0, 4.0]), vec![-1.5, -0.5, 0.5, 1.5]);
        assert_eq!(mc_advantage(&[2.5; 4]), vec![0.0; 4]);
        assert!(matches!(mc_advantages(&[1.0, 2.0, 3.0], 2), Err(Error::Shape(_))));
    }

    #[test]
    fn normalization_hand_values() {
        let (n, mu, sd) = normalize_batch(&[-1.0, 1.0], 1e-8).unwrap();
        assert_eq!((n, mu, sd), (vec![-1.0, 1.0], 0.0, 1.0));
        let (n, _, _) = normalize_batch(&[0.0, 0.0, 0.0], 1e-8).unwrap();
        assert_eq!(n, vec![0.0; 3]);
        let (n, _, sd) = normalize_batch(&[-1.5, -0.5, 0.5, 1.5], 1e-8).unwrap();
        assert!((sd - 1.25f64.sqrt()).abs() < 1e-15);
        let expected = [-1.3416, -0.4472, 0.4472, 1.3416];
        for (a, b) in n.iter().zip(expected) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    fn sample(log_pi0: f64, log_pit: f64) -> Sample {
        Sample { prompt: 0, response: 0, reward: 0.0, log_pi0, log_pit }
    }

    #[test]
    fn weight_reductions_and_clip() {
        let w = sample_weights(&[sample(-1.0, -3.0)], &[0.2], 0.0, 0.05, 20.0).unwrap();
        assert_eq!(w.w_reg, vec![1.0]);
        let w = sample_weights(&[sample(-2.0, -2.0)], &[0.0], 0.1, 0.05, 20.0).unwrap();
        assert_eq!(w.w_final, vec![1.0]);
        // w_reg * w_adv = 50 exceeds the clip of 20.
        let w = sample_weights(&[sample(0.0, 0.0)], &[0.05 * 50f64.ln()], 0.1, 0.05, 20.0).unwrap();
        assert!((w.w_final[0] - 20.0).abs() < 1e-12);
        assert!(w.clipped[0]);
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let task = crate::envs::make_task(&crate::envs::TaskSpec::standard_bandit()).unwrap();
        let (l, g) = dar_loss_and_grad(&task.pi0, &[(0, 1), (0, 2)], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(RegConfig::default().validate().is_ok());
        let bad = RegConfig { alpha: 1.5, ..RegConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = RegConfig { k: 0, ..RegConfig::default() };
        assert!(bad.validate().is_err());
    }
}
