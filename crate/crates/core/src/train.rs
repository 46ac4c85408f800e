//! Plumbing shared by every training loop: batch sampling, exact per-step
//! metrics, abort handling and step observers.

use rand::Rng;

use crate::envs::{distributions, mean_expected_reward, RewardChannel, Task};
use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;
use crate::policy::{kl_divergence, Distribution, PolicyEval, PromptSet, TabularPolicy};
use crate::trace::{Trace, TraceRecord};

/// Called after every update with the 1-based step number and the new policy.
pub trait StepObserver {
    fn observe(&mut self, step: usize, policy: &TabularPolicy) -> Result<()>;
}

impl<F: FnMut(usize, &TabularPolicy) -> Result<()>> StepObserver for F {
    fn observe(&mut self, step: usize, policy: &TabularPolicy) -> Result<()> {
        self(step, policy)
    }
}

/// Observer that ignores every step.
pub struct NoObserver;

impl StepObserver for NoObserver {
    fn observe(&mut self, _: usize, _: &TabularPolicy) -> Result<()> {
        Ok(())
    }
}

/// One prompt draw and its `K` sampled responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub prompt: usize,
    pub responses: Vec<usize>,
}

pub(crate) fn sample_groups<R: Rng + ?Sized>(
    eval: &PolicyEval<'_>,
    prompts: &PromptSet,
    batch_prompts: usize,
    k: usize,
    rng: &mut R,
) -> Vec<Group> {
    (0..batch_prompts)
        .map(|_| {
            let prompt = prompts.sample(rng);
            Group { prompt, responses: eval.sample_k(prompt, k, rng) }
        })
        .collect()
}

/// Exact metrics for trace records.
pub(crate) struct Metrics<'a> {
    task: &'a Task,
    pi0: Vec<Distribution>,
}

impl<'a> Metrics<'a> {
    pub(crate) fn new(task: &'a Task) -> Self {
        Metrics { task, pi0: task.pi0_distributions() }
    }

    pub(crate) fn pi0(&self) -> &[Distribution] {
        &self.pi0
    }

    pub(crate) fn record(
        &self,
        step: usize,
        policy: &TabularPolicy,
        pit: &[Distribution],
        mean_w_final: f64,
        clip_fraction: f64,
        loss: f64,
    ) -> Result<TraceRecord> {
        let dists = distributions(&policy.eval(), policy.n_prompts());
        let prompts = &self.task.prompts;
        Ok(TraceRecord {
            step,
            expected_true_reward: mean_expected_reward(&dists, &self.task.rewards, RewardChannel::True, prompts)?,
            expected_proxy_reward: mean_expected_reward(&dists, &self.task.rewards, RewardChannel::Proxy, prompts)?,
            kl_to_pi0: mean_kl(&dists, &self.pi0, prompts)?,
            kl_to_pit_prev: mean_kl(&dists, pit, prompts)?,
            mean_w_final,
            clip_fraction,
            loss,
        })
    }
}

/// Prompt-weighted `KL(p(.|x) || q(.|x))`.
pub fn mean_kl(p: &[Distribution], q: &[Distribution], prompts: &PromptSet) -> Result<f64> {
    let terms = p
        .iter()
        .zip(q)
        .enumerate()
        .map(|(x, (a, b))| Ok(prompts.weight(x) * kl_divergence(a, b)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&terms))
}

/// `-sum coef * log pi(y|x)` over `(prompt, response, coef)` items and its
/// gradient with respect to the logits.
pub fn weighted_nll_and_grad(eval: &PolicyEval<'_>, items: &[(usize, usize, f64)]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; eval.policy().num_params()];
    let mut terms = Vec::with_capacity(items.len());
    for &(x, y, c) in items {
        if c == 0.0 {
            continue;
        }
        terms.push(-c * eval.log_prob(x, y));
        eval.add_log_prob_grad(x, y, -c, &mut grad);
    }
    (pairwise_sum(&terms), grad)
}

pub(crate) fn aborted(step: usize, reason: impl Into<String>, trace: &Trace) -> Error {
    Error::TrainingAborted { step, reason: reason.into(), trace: Box::new(trace.clone()) }
}

/// Applies `policy += scale * direction`, turning non-finite logits into an abort.
pub(crate) fn apply_step(
    policy: &mut TabularPolicy,
    direction: &[f64],
    scale: f64,
    step: usize,
    trace: &Trace,
) -> Result<()> {
    policy.step(direction, scale).map_err(|e| aborted(step, e.to_string(), trace))
}

pub(crate) fn check_loss(loss: f64, step: usize, trace: &Trace) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(aborted(step, format!("non-finite loss {loss}"), trace))
    }
}
