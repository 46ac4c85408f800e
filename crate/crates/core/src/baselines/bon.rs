//! Best-of-n selection followed by one supervised step on the winners.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dar::RegConfig;
use crate::envs::{distributions, RewardChannel, Task};
use crate::error::{Error, Result};
use crate::numeric::mean;
use crate::policy::TabularPolicy;
use crate::trace::{Trace, TrainOutcome};
use crate::train::{apply_step, check_loss, sample_groups, weighted_nll_and_grad, Metrics, NoObserver, StepObserver};

/// One prompt's selection.
#[derive(Debug, Clone, PartialEq)]
pub struct BonSelection {
    pub prompt: usize,
    pub response: usize,
    pub reward: f64,
    pub group_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BonStep {
    pub selections: Vec<BonSelection>,
    pub loss: f64,
}

/// Position of the best reward; equal rewards go to the lowest response index.
pub fn bon_select(responses: &[usize], rewards: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..responses.len() {
        let better = rewards[i] > rewards[best] || (rewards[i] == rewards[best] && responses[i] < responses[best]);
        if better {
            best = i;
        }
    }
    best
}

/// Samples `n` responses from `pit` for each of `batch_prompts` prompt draws,
/// keeps the best by proxy reward and applies one unweighted SFT step of size
/// `lr` to `pit` in place.
pub fn bon_iter_sft_step<R: Rng + ?Sized>(
    pit: &mut TabularPolicy,
    task: &Task,
    n: usize,
    batch_prompts: usize,
    lr: f64,
    rng: &mut R,
) -> Result<BonStep> {
    if n == 0 || batch_prompts == 0 {
        return Err(Error::Parameter("best-of-n needs n >= 1 and at least one prompt".into()));
    }
    let groups = sample_groups(&pit.eval(), &task.prompts, batch_prompts, n, rng);
    let table = task.rewards.channel(RewardChannel::Proxy);
    let mut selections = Vec::with_capacity(groups.len());
    for g in &groups {
        let rewards: Vec<f64> = g.responses.iter().map(|&y| table[g.prompt][y]).collect();
        let best = bon_select(&g.responses, &rewards);
        selections.push(BonSelection {
            prompt: g.prompt,
            response: g.responses[best],
            reward: rewards[best],
            group_mean: mean(&rewards),
        });
    }
    let scale = 1.0 / selections.len() as f64;
    let items: Vec<(usize, usize, f64)> = selections.iter().map(|s| (s.prompt, s.response, scale)).collect();
    let (loss, grad) = weighted_nll_and_grad(&pit.eval(), &items);
    if !loss.is_finite() {
        return Err(Error::Evaluation(format!("non-finite loss {loss}")));
    }
    pit.step(&grad, -lr)?;
    Ok(BonStep { selections, loss })
}

pub fn iter_sft_train(task: &Task, config: &RegConfig, n: usize, seed: u64) -> Result<TrainOutcome> {
    iter_sft_train_observed(task, config, n, seed, &mut NoObserver)
}

pub fn iter_sft_train_observed(
    task: &Task,
    config: &RegConfig,
    n: usize,
    seed: u64,
    observer: &mut dyn StepObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("best-of-n needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let metrics = Metrics::new(task);
    let mut policy = task.pi0.clone();
    let mut pit = policy.clone();
    let mut trace = Trace::new("iter_sft");
    for step in 1..=config.steps {
        pit = policy.clone();
        let pit_dists = distributions(&pit.eval(), task.n_prompts());
        let groups = sample_groups(&pit.eval(), &task.prompts, config.batch_prompts, n, &mut rng);
        let table = task.rewards.channel(RewardChannel::Proxy);
        let scale = 1.0 / groups.len() as f64;
        let items: Vec<(usize, usize, f64)> = groups
            .iter()
            .map(|g| {
                let rewards: Vec<f64> = g.responses.iter().map(|&y| table[g.prompt][y]).collect();
                (g.prompt, g.responses[bon_select(&g.responses, &rewards)], scale)
            })
            .collect();
        let (loss, grad) = weighted_nll_and_grad(&policy.eval(), &items);
        check_loss(loss, step, &trace)?;
        apply_step(&mut policy, &grad, -config.learning_rate, step, &trace)?;
        trace.push(metrics.record(step, &policy, &pit_dists, 1.0, 0.0, loss)?);
        observer.observe(step, &policy)?;
    }
    Ok(TrainOutcome { trace, final_policy: policy, last_pit: pit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_ties_go_to_lowest_index() {
        assert_eq!(bon_select(&[5, 2, 7], &[1.0, 1.0, 0.0]), 1);
        assert_eq!(bon_select(&[3], &[0.0]), 0);
        assert_eq!(bon_select(&[0, 1, 2, 3], &[0.1, 0.9, 0.3, 0.9]), 1);
    }
}
