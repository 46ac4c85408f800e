//! PPO and its dual-KL variants with token-level reward shaping and an exact
//! per-prompt value baseline in place of a learned critic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dar::RegConfig;
use crate::envs::{distributions, RewardChannel, Task};
use crate::error::{Error, Result};
use crate::numeric::{mean, pairwise_sum, population_std};
use crate::policy::{check_alpha, Distribution, PolicyEval, TabularPolicy};
use crate::trace::{Trace, TrainOutcome};
use crate::train::{apply_step, check_loss, sample_groups, Group, Metrics, NoObserver, StepObserver};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PPOConfig {
    pub clip_epsilon: f64,
    pub kl_lambda: f64,
    pub shaping_beta: f64,
    pub alpha: f64,
    pub updates_per_batch: usize,
    /// Overrides the shared learning rate when set.
    pub learning_rate: Option<f64>,
    /// Standardize token advantages over the batch before the surrogate.
    pub whiten_advantages: bool,
    /// Subtracted from the terminal reward of truncated end-token responses.
    pub missing_eos_penalty: f64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            clip_epsilon: 0.2,
            kl_lambda: 0.1,
            shaping_beta: 0.03,
            alpha: 0.3,
            updates_per_batch: 1,
            learning_rate: None,
            whiten_advantages: true,
            missing_eos_penalty: 1.0,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::Config("clip_epsilon must be positive".into()));
        }
        if !(self.kl_lambda >= 0.0) || !(self.shaping_beta >= 0.0) {
            return Err(Error::Config("kl_lambda and shaping_beta must be nonnegative".into()));
        }
        check_alpha(self.alpha).map_err(|e| Error::Config(e.to_string()))?;
        if self.updates_per_batch == 0 {
            return Err(Error::Config("updates_per_batch must be >= 1".into()));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config("ppo learning_rate must be positive and finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpoVariant {
    /// Clipped surrogate, shaping against `pi0`.
    Ppo,
    /// Unclipped surrogate minus `lambda KL(pit || pi_theta)`, shaping against `pi0`.
    PpoPenalty,
    /// Unclipped surrogate with dual reverse-KL shaping.
    Dual,
    /// Clipped surrogate with dual reverse-KL shaping.
    DualClip,
    /// Unclipped surrogate with reverse KL to `pi0` and forward KL to `pit`.
    DualMix,
    /// Clipped surrogate minus an explicit `shaping_beta KL(pi_theta || pi0)`, no shaping.
    Align,
}

impl PpoVariant {
    pub fn name(self) -> &'static str {
        match self {
            PpoVariant::Ppo => "ppo",
            PpoVariant::PpoPenalty => "ppo_penalty",
            PpoVariant::Dual => "dual_ppo",
            PpoVariant::DualClip => "dual_ppo_clip",
            PpoVariant::DualMix => "dual_mix_ppo",
            PpoVariant::Align => "ppo_align",
        }
    }

    fn clipped(self) -> bool {
        matches!(self, PpoVariant::Ppo | PpoVariant::DualClip | PpoVariant::Align)
    }
}

/// Per-token shaped rewards of one response. `penalties` holds the unscaled
/// per-token terms; `token_rewards[i] = -beta * penalties[i]`, plus `terminal`
/// at the last token.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapedReward {
    pub token_rewards: Vec<f64>,
    pub terminal: f64,
    pub penalties: Vec<f64>,
}

impl ShapedReward {
    fn from_penalties(reward: f64, penalties: Vec<f64>, beta: f64) -> Self {
        let last = penalties.len() - 1;
        let token_rewards = penalties
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let shaped = -beta * p;
                if i == last {
                    shaped + reward
                } else {
                    shaped
                }
            })
            .collect();
        ShapedReward { token_rewards, terminal: reward, penalties }
    }

    /// Undiscounted reward-to-go at every token.
    pub fn returns(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.token_rewards.len()];
        let mut acc = 0.0;
        for i in (0..out.len()).rev() {
            acc += self.token_rewards[i];
            out[i] = acc;
        }
        out
    }
}

/// `r_i = -beta log(pi_theta_i / pi_ref_i)`, terminal reward at the end.
pub fn shaped_token_rewards(
    reward: f64,
    pitheta: &PolicyEval<'_>,
    piref: &PolicyEval<'_>,
    prompt: usize,
    response: usize,
    beta: f64,
) -> ShapedReward {
    let a = pitheta.token_log_probs(prompt, response);
    let b = piref.token_log_probs(prompt, response);
    let pen = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    ShapedReward::from_penalties(reward, pen, beta)
}

/// Dual shaping `-beta (alpha log(pi/pi0) + (1 - alpha) log(pi/pit))` per token.
pub fn dual_shaped_rewards(
    reward: f64,
    pitheta: &PolicyEval<'_>,
    pi0: &PolicyEval<'_>,
    pit: &PolicyEval<'_>,
    prompt: usize,
    response: usize,
    alpha: f64,
    beta: f64,
) -> ShapedReward {
    let th = pitheta.token_log_probs(prompt, response);
    let l0 = pi0.token_log_probs(prompt, response);
    let lt = pit.token_log_probs(prompt, response);
    let pen = (0..th.len())
        .map(|i| {
            let to_ref = alpha * (th[i] - l0[i]);
            if alpha == 1.0 {
                to_ref
            } else {
                to_ref + (1.0 - alpha) * (th[i] - lt[i])
            }
        })
        .collect();
    ShapedReward::from_penalties(reward, pen, beta)
}

/// Mixed shaping with the forward-KL term `(1 - alpha) (pit/pi) log(pit/pi)` per token.
pub fn dual_mix_shaped_rewards(
    reward: f64,
    pitheta: &PolicyEval<'_>,
    pi0: &PolicyEval<'_>,
    pit: &PolicyEval<'_>,
    prompt: usize,
    response: usize,
    alpha: f64,
    beta: f64,
) -> ShapedReward {
    let th = pitheta.token_log_probs(prompt, response);
    let l0 = pi0.token_log_probs(prompt, response);
    let lt = pit.token_log_probs(prompt, response);
    let pen = (0..th.len())
        .map(|i| {
            let to_ref = alpha * (th[i] - l0[i]);
            if alpha == 1.0 {
                to_ref
            } else {
                let log_ratio = lt[i] - th[i];
                to_ref + (1.0 - alpha) * log_ratio.exp() * log_ratio
            }
        })
        .collect();
    ShapedReward::from_penalties(reward, pen, beta)
}

/// A sampled response with one advantage per generating step.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSample {
    pub prompt: usize,
    pub response: usize,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SurrogateStats {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// Clipped surrogate: mean over samples of the per-token mean of
/// `min(ratio A, clip(ratio, 1 - eps, 1 + eps) A)`, with its exact gradient.
pub fn ppo_clip_surrogate(
    pitheta: &TabularPolicy,
    pit: &TabularPolicy,
    samples: &[TokenSample],
    clip_epsilon: f64,
) -> Result<(f64, Vec<f64>)> {
    let (obj, grad, _) = ppo_surrogate(&pitheta.eval(), &pit.eval(), samples, Some(clip_epsilon))?;
    Ok((obj, grad))
}

/// Surrogate with an optional clip; `None` gives the plain ratio objective.
pub fn ppo_surrogate(
    pitheta: &PolicyEval<'_>,
    pit: &PolicyEval<'_>,
    samples: &[TokenSample],
    clip_epsilon: Option<f64>,
) -> Result<(f64, Vec<f64>, SurrogateStats)> {
    if samples.is_empty() {
        return Err(Error::Shape("surrogate needs at least one sample".into()));
    }
    let mut grad = vec![0.0; pitheta.policy().num_params()];
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut ratios = Vec::new();
    let mut clipped = 0usize;
    let n = samples.len() as f64;
    for s in samples {
        let lth = pitheta.token_log_probs(s.prompt, s.response);
        let lt = pit.token_log_probs(s.prompt, s.response);
        if lth.len() != s.advantages.len() {
            return Err(Error::Shape("one advantage per generating step required".into()));
        }
        let len = lth.len() as f64;
        let mut terms = Vec::with_capacity(lth.len());
        for (i, a) in s.advantages.iter().enumerate() {
            let ratio = (lth[i] - lt[i]).exp();
            if !ratio.is_finite() {
                return Err(Error::Evaluation(format!("non-finite ratio at prompt {} response {}", s.prompt, s.response)));
            }
            ratios.push(ratio);
            let unclipped = ratio * a;
            let (value, active) = match clip_epsilon {
                Some(eps) => {
                    let c = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
                    if c < unclipped {
                        (c, false)
                    } else {
                        (unclipped, true)
                    }
                }
                None => (unclipped, true),
            };
            if !active {
                clipped += 1;
            }
            terms.push(value);
            if active {
                pitheta.add_step_log_prob_grad(s.prompt, s.response, i, unclipped / (len * n), &mut grad);
            }
        }
        per_sample.push(pairwise_sum(&terms) / len);
    }
    let stats = SurrogateStats {
        mean_ratio: mean(&ratios),
        clip_fraction: clipped as f64 / ratios.len() as f64,
    };
    Ok((pairwise_sum(&per_sample) / n, grad, stats))
}

/// `-lambda * mean_g KL(pit(.|x_g) || pi_theta(.|x_g))` over the batch's prompt
/// draws, and its gradient.
pub fn kl_penalty_and_grad(
    pitheta: &PolicyEval<'_>,
    pit: &[Distribution],
    batch_prompts: &[usize],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; pitheta.policy().num_params()];
    let mut values = Vec::with_capacity(batch_prompts.len());
    let scale = lambda / batch_prompts.len() as f64;
    for &x in batch_prompts {
        let theta = pitheta.distribution(x);
        values.push(crate::policy::kl_divergence(&pit[x], &theta)?);
        if lambda != 0.0 {
            for (y, &p) in pit[x].probs().iter().enumerate() {
                pitheta.add_log_prob_grad(x, y, scale * p, &mut grad);
            }
        }
    }
    Ok((-lambda * mean(&values), grad))
}

/// `-beta * mean_g KL(pi_theta(.|x_g) || pi0(.|x_g))` and its gradient.
pub fn reference_kl_penalty_and_grad(
    pitheta: &PolicyEval<'_>,
    pi0: &[Distribution],
    batch_prompts: &[usize],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; pitheta.policy().num_params()];
    let mut values = Vec::with_capacity(batch_prompts.len());
    let scale = beta / batch_prompts.len() as f64;
    for &x in batch_prompts {
        let theta = pitheta.distribution(x);
        let kl = crate::policy::kl_divergence(&theta, &pi0[x])?;
        values.push(kl);
        for y in 0..theta.len() {
            let log_ratio = theta.log_probs()[y] - pi0[x].log_probs()[y];
            pitheta.add_log_prob_grad(x, y, -scale * theta.probs()[y] * (log_ratio - kl), &mut grad);
        }
    }
    Ok((-beta * mean(&values), grad))
}

fn shaped(
    variant: PpoVariant,
    reward: f64,
    theta: &PolicyEval<'_>,
    pi0: &PolicyEval<'_>,
    pit: &PolicyEval<'_>,
    prompt: usize,
    response: usize,
    cfg: &PPOConfig,
) -> ShapedReward {
    match variant {
        PpoVariant::Ppo | PpoVariant::PpoPenalty => {
            shaped_token_rewards(reward, theta, pi0, prompt, response, cfg.shaping_beta)
        }
        PpoVariant::Dual | PpoVariant::DualClip => {
            dual_shaped_rewards(reward, theta, pi0, pit, prompt, response, cfg.alpha, cfg.shaping_beta)
        }
        PpoVariant::DualMix => {
            dual_mix_shaped_rewards(reward, theta, pi0, pit, prompt, response, cfg.alpha, cfg.shaping_beta)
        }
        PpoVariant::Align => shaped_token_rewards(reward, theta, pi0, prompt, response, 0.0),
    }
}

/// Terminal reward including the missing-end-token penalty.
fn terminal_reward(task: &Task, cfg: &PPOConfig, prompt: usize, response: usize) -> f64 {
    let r = task.rewards.reward(RewardChannel::Proxy, prompt, response);
    if task.space.is_truncated(response) {
        r - cfg.missing_eos_penalty
    } else {
        r
    }
}

/// Token advantages `G_i - V(x)` for the batch, where `V(x)` is the exact
/// expected shaped return under `pit`.
fn token_advantages(
    task: &Task,
    variant: PpoVariant,
    cfg: &PPOConfig,
    groups: &[Group],
    theta: &PolicyEval<'_>,
    pi0: &PolicyEval<'_>,
    pit: &PolicyEval<'_>,
    pit_dists: &[Distribution],
) -> Vec<TokenSample> {
    let mut values: Vec<Option<f64>> = vec![None; task.n_prompts()];
    let mut samples = Vec::new();
    for g in groups {
        let x = g.prompt;
        let v = *values[x].get_or_insert_with(|| {
            let returns: Vec<f64> = (0..task.space.len())
                .map(|y| {
                    let s = shaped(variant, terminal_reward(task, cfg, x, y), theta, pi0, pit, x, y, cfg);
                    s.returns()[0]
                })
                .collect();
            pit_dists[x].expectation(&returns).expect("lengths match")
        });
        for &y in &g.responses {
            let s = shaped(variant, terminal_reward(task, cfg, x, y), theta, pi0, pit, x, y, cfg);
            samples.push(TokenSample {
                prompt: x,
                response: y,
                advantages: s.returns().iter().map(|g| g - v).collect(),
            });
        }
    }
    if cfg.whiten_advantages {
        let all: Vec<f64> = samples.iter().flat_map(|s| s.advantages.iter().copied()).collect();
        let (mu, sd) = (mean(&all), population_std(&all).max(1e-8));
        for s in &mut samples {
            for a in &mut s.advantages {
                *a = (*a - mu) / sd;
            }
        }
    }
    samples
}

pub fn ppo_train(task: &Task, reg: &RegConfig, ppo: &PPOConfig, variant: PpoVariant, seed: u64) -> Result<TrainOutcome> {
    ppo_train_observed(task, reg, ppo, variant, seed, &mut NoObserver)
}

pub fn ppo_train_observed(
    task: &Task,
    reg: &RegConfig,
    ppo: &PPOConfig,
    variant: PpoVariant,
    seed: u64,
    observer: &mut dyn StepObserver,
) -> Result<TrainOutcome> {
    reg.validate()?;
    ppo.validate()?;
    let lr = ppo.learning_rate.unwrap_or(reg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let metrics = Metrics::new(task);
    let pi0_eval = task.pi0.eval();
    let mut policy = task.pi0.clone();
    let mut pit = policy.clone();
    let mut trace = Trace::new(variant.name());
    let clip = variant.clipped().then_some(ppo.clip_epsilon);

    for step in 1..=reg.steps {
        pit = policy.clone();
        let pit_eval = pit.eval();
        let pit_dists = distributions(&pit_eval, task.n_prompts());
        let groups = sample_groups(&pit_eval, &task.prompts, reg.batch_prompts, reg.k, &mut rng);
        let batch_prompts: Vec<usize> = groups.iter().map(|g| g.prompt).collect();
        let mut last = (0.0, SurrogateStats::default());
        for _ in 0..ppo.updates_per_batch {
            let theta_eval = policy.eval();
            let samples = token_advantages(task, variant, ppo, &groups, &theta_eval, &pi0_eval, &pit_eval, &pit_dists);
            let (mut obj, mut grad, stats) = ppo_surrogate(&theta_eval, &pit_eval, &samples, clip)
                .map_err(|e| crate::train::aborted(step, e.to_string(), &trace))?;
            let extra = match variant {
                PpoVariant::PpoPenalty => Some(kl_penalty_and_grad(&theta_eval, &pit_dists, &batch_prompts, ppo.kl_lambda)?),
                PpoVariant::Align => Some(reference_kl_penalty_and_grad(
                    &theta_eval,
                    metrics.pi0(),
                    &batch_prompts,
                    ppo.shaping_beta,
                )?),
                _ => None,
            };
            if let Some((pen, pgrad)) = extra {
                obj += pen;
                for (g, p) in grad.iter_mut().zip(pgrad) {
                    *g += p;
                }
            }
            check_loss(obj, step, &trace)?;
            drop(theta_eval);
            apply_step(&mut policy, &grad, lr, step, &trace)?;
            last = (-obj, stats);
        }
        trace.push(metrics.record(step, &policy, &pit_dists, last.1.mean_ratio, last.1.clip_fraction, last.0)?);
        observer.observe(step, &policy)?;
    }
    Ok(TrainOutcome { trace, final_policy: policy, last_pit: pit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_arithmetic() {
        use crate::policy::{ResponseSpace, SequenceMode, DEFAULT_ENUMERATION_CAP};
        use std::sync::Arc;
        let space = Arc::new(ResponseSpace::new(2, 1, SequenceMode::FixedLength, DEFAULT_ENUMERATION_CAP).unwrap());
        // pit(0) = 0.5 and theta(0) = 0.75, so the ratio at response 0 is 1.5.
        let pit = TabularPolicy::from_flat_logits(space.clone(), vec![vec![0.0, 0.0]]).unwrap();
        let theta = TabularPolicy::from_flat_logits(space, vec![vec![3f64.ln(), 0.0]]).unwrap();
        let s = TokenSample { prompt: 0, response: 0, advantages: vec![1.0] };
        let (obj, grad) = ppo_clip_surrogate(&theta, &pit, std::slice::from_ref(&s), 0.2).unwrap();
        assert!((obj - 1.2).abs() < 1e-12);
        assert_eq!(grad, vec![0.0, 0.0]);
        let (obj, _) = ppo_clip_surrogate(&pit, &pit, &[s], 0.2).unwrap();
        assert_eq!(obj, 1.0);
    }

    #[test]
    fn shaping_hand_values() {
        let s = ShapedReward::from_penalties(1.0, vec![0.1, -0.3], 0.5);
        assert!((s.token_rewards[0] + 0.05).abs() < 1e-15);
        assert!((s.token_rewards[1] - 1.15).abs() < 1e-15);
        let s = ShapedReward::from_penalties(2.0, vec![0.4, 0.2], 0.0);
        assert_eq!(s.token_rewards, vec![0.0, 2.0]);
    }
}
