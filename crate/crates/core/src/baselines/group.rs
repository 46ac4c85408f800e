//! Group-baseline policy gradients (leave-one-out and standardized groups)
//! with sequence-level KL shaping against `pi0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dar::{mc_advantage, RegConfig};
use crate::envs::{distributions, RewardChannel, Task};
use crate::error::{Error, Result};
use crate::numeric::population_std;
use crate::trace::{Trace, TrainOutcome};
use crate::train::{apply_step, check_loss, sample_groups, Metrics, NoObserver, StepObserver};

pub const GRPO_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupEstimator {
    Rloo,
    Grpo,
}

fn check_group(group: &[f64]) -> Result<()> {
    if group.len() < 2 {
        return Err(Error::Parameter(format!("group baselines need K >= 2, got {}", group.len())));
    }
    Ok(())
}

/// `r_i - mean_{j != i} r_j`, which is `K / (K - 1)` times the plain group-mean advantage.
pub fn rloo_advantage(group: &[f64]) -> Result<Vec<f64>> {
    check_group(group)?;
    let k = group.len() as f64;
    let total: f64 = group.iter().sum();
    Ok(group.iter().map(|r| r - (total - r) / (k - 1.0)).collect())
}

/// `(r_i - mean) / max(std, floor)` with the population std.
pub fn grpo_advantage(group: &[f64]) -> Result<Vec<f64>> {
    check_group(group)?;
    let sd = population_std(group).max(GRPO_STD_FLOOR);
    Ok(mc_advantage(group).into_iter().map(|a| a / sd).collect())
}

pub fn group_pg_train(task: &Task, config: &RegConfig, estimator: GroupEstimator, seed: u64) -> Result<TrainOutcome> {
    group_pg_train_observed(task, config, estimator, seed, &mut NoObserver)
}

pub fn group_pg_train_observed(
    task: &Task,
    config: &RegConfig,
    estimator: GroupEstimator,
    seed: u64,
    observer: &mut dyn StepObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.k < 2 {
        return Err(Error::Config(format!("group baselines need k >= 2, got {}", config.k)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let metrics = Metrics::new(task);
    let pi0_eval = task.pi0.eval();
    let mut policy = task.pi0.clone();
    let mut pit = policy.clone();
    let mut trace = Trace::new(match estimator {
        GroupEstimator::Rloo => "rloo",
        GroupEstimator::Grpo => "grpo",
    });
    let table = task.rewards.channel(RewardChannel::Proxy);

    for step in 1..=config.steps {
        pit = policy.clone();
        let pit_eval = pit.eval();
        let pit_dists = distributions(&pit_eval, task.n_prompts());
        let groups = sample_groups(&pit_eval, &task.prompts, config.batch_prompts, config.k, &mut rng);
        let n = (config.batch_prompts * config.k) as f64;
        let mut items = Vec::with_capacity(groups.len() * config.k);
        for g in &groups {
            let x = g.prompt;
            let shaped: Vec<f64> = g
                .responses
                .iter()
                .map(|&y| table[x][y] - config.beta * (pit_eval.log_prob(x, y) - pi0_eval.log_prob(x, y)))
                .collect();
            let adv = match estimator {
                GroupEstimator::Rloo => rloo_advantage(&shaped)?,
                GroupEstimator::Grpo => grpo_advantage(&shaped)?,
            };
            for (&y, a) in g.responses.iter().zip(adv) {
                items.push((x, y, a));
            }
        }
        let mut loss = 0.0;
        for _ in 0..config.updates_per_batch {
            let theta = policy.eval();
            let mut grad = vec![0.0; policy.num_params()];
            let mut terms = Vec::with_capacity(items.len());
            for &(x, y, a) in &items {
                terms.push(-a * theta.log_prob(x, y) / n);
                theta.add_log_prob_grad(x, y, a / n, &mut grad);
            }
            loss = terms.iter().sum();
            check_loss(loss, step, &trace)?;
            drop(theta);
            apply_step(&mut policy, &grad, config.learning_rate, step, &trace)?;
        }
        trace.push(metrics.record(step, &policy, &pit_dists, 1.0, 0.0, loss)?);
        observer.observe(step, &policy)?;
    }
    Ok(TrainOutcome { trace, final_policy: policy, last_pit: pit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let a = rloo_advantage(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let expected = [-2.0, -2.0 / 3.0, 2.0 / 3.0, 2.0];
        for (x, y) in a.iter().zip(expected) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(rloo_advantage(&[1.0]).is_err());
        assert_eq!(grpo_advantage(&[3.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        let g = grpo_advantage(&[0.0, 2.0]).unwrap();
        assert_eq!(g, vec![-1.0, 1.0]);
    }
}
