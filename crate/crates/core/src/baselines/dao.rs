//! Direct ascent on the dual-KL objective, either with a REINFORCE estimator
//! on on-policy samples or with importance ratios against `pit`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dar::{build_batch, Estimation, RegConfig};
use crate::envs::{distributions, RewardChannel, Task};
use crate::error::{Error, Result};
use crate::numeric::{mean, pairwise_sum};
use crate::oracle::AdvantageTable;
use crate::policy::{check_alpha, Distribution, PolicyEval, PromptSet};
use crate::trace::{Trace, TrainOutcome};
use crate::train::{aborted, apply_step, check_loss, Metrics, NoObserver, StepObserver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaoStyle {
    #[default]
    Reinforce,
    ImportanceSampled,
}

/// `log(pi_theta / (pi0^alpha pit^(1-alpha)))` at one response.
fn log_ratio_to_interp(l_theta: f64, l0: f64, lt: f64, alpha: f64) -> f64 {
    if alpha == 1.0 {
        l_theta - l0
    } else if alpha == 0.0 {
        l_theta - lt
    } else {
        l_theta - alpha * l0 - (1.0 - alpha) * lt
    }
}

fn check_inputs(samples: &[(usize, usize)], adv: &[f64], alpha: f64, beta: f64) -> Result<()> {
    check_alpha(alpha)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Parameter(format!("beta must be positive and finite, got {beta}")));
    }
    if samples.is_empty() || samples.len() != adv.len() {
        return Err(Error::Shape("one advantage per sample and at least one sample required".into()));
    }
    Ok(())
}

/// REINFORCE ascent direction `(1/N) sum grad log pi_theta(y) (A - beta log(pi_theta / u))`
/// for samples drawn from `pi_theta`, with `u = pi0^alpha pit^(1-alpha)`.
pub fn dao_reinforce_grad(
    pitheta: &PolicyEval<'_>,
    pi0: &PolicyEval<'_>,
    pit: &PolicyEval<'_>,
    samples: &[(usize, usize)],
    adv: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    check_inputs(samples, adv, alpha, beta)?;
    let mut grad = vec![0.0; pitheta.policy().num_params()];
    let n = samples.len() as f64;
    for (&(x, y), a) in samples.iter().zip(adv) {
        let lr = log_ratio_to_interp(pitheta.log_prob(x, y), pi0.log_prob(x, y), pit.log_prob(x, y), alpha);
        pitheta.add_log_prob_grad(x, y, (a - beta * lr) / n, &mut grad);
    }
    Ok(grad)
}

/// Expectation of the REINFORCE direction over `pi_theta` and the prompt weights.
pub fn dao_reinforce_exact_grad(
    pitheta: &PolicyEval<'_>,
    pi0: &[Distribution],
    pit: &[Distribution],
    adv: &AdvantageTable,
    prompts: &PromptSet,
    alpha: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let mut grad = vec![0.0; pitheta.policy().num_params()];
    for x in 0..prompts.len() {
        let theta = pitheta.distribution(x);
        for y in 0..theta.len() {
            let lr = log_ratio_to_interp(theta.log_probs()[y], pi0[x].log_probs()[y], pit[x].log_probs()[y], alpha);
            let c = prompts.weight(x) * theta.probs()[y] * (adv.values[x][y] - beta * lr);
            pitheta.add_log_prob_grad(x, y, c, &mut grad);
        }
    }
    Ok(grad)
}

/// Importance-sampled objective `(1/N) sum rho (A - beta log(pi_theta / u))` with
/// `rho = pi_theta / pit` on samples from `pit`, and its gradient.
pub fn dao_is_objective(
    pitheta: &PolicyEval<'_>,
    pi0: &PolicyEval<'_>,
    pit: &PolicyEval<'_>,
    samples: &[(usize, usize)],
    adv: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    check_inputs(samples, adv, alpha, beta)?;
    let mut grad = vec![0.0; pitheta.policy().num_params()];
    let mut terms = Vec::with_capacity(samples.len());
    let n = samples.len() as f64;
    for (&(x, y), a) in samples.iter().zip(adv) {
        let lth = pitheta.log_prob(x, y);
        let lt = pit.log_prob(x, y);
        let rho = (lth - lt).exp();
        let lr = log_ratio_to_interp(lth, pi0.log_prob(x, y), lt, alpha);
        terms.push(rho * (a - beta * lr));
        pitheta.add_log_prob_grad(x, y, rho * (a - beta * (lr + 1.0)) / n, &mut grad);
    }
    Ok((pairwise_sum(&terms) / n, grad))
}

/// Expectation of [`dao_is_objective`] under `pit`, which equals the
/// prompt-weighted dual-KL objective, and its gradient.
pub fn dao_is_exact(
    pitheta: &PolicyEval<'_>,
    pi0: &[Distribution],
    pit: &[Distribution],
    adv: &AdvantageTable,
    prompts: &PromptSet,
    alpha: f64,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    check_alpha(alpha)?;
    let mut grad = vec![0.0; pitheta.policy().num_params()];
    let mut terms = Vec::new();
    for x in 0..prompts.len() {
        let theta = pitheta.distribution(x);
        for y in 0..theta.len() {
            let (lth, lt) = (theta.log_probs()[y], pit[x].log_probs()[y]);
            let lr = log_ratio_to_interp(lth, pi0[x].log_probs()[y], lt, alpha);
            let mass = prompts.weight(x) * theta.probs()[y];
            if mass == 0.0 {
                continue;
            }
            terms.push(mass * (adv.values[x][y] - beta * lr));
            pitheta.add_log_prob_grad(x, y, mass * (adv.values[x][y] - beta * (lr + 1.0)), &mut grad);
        }
    }
    Ok((pairwise_sum(&terms), grad))
}

pub fn dao_train(task: &Task, config: &RegConfig, style: DaoStyle, seed: u64) -> Result<TrainOutcome> {
    dao_train_observed(task, config, style, seed, &mut NoObserver)
}

pub fn dao_train_observed(
    task: &Task,
    config: &RegConfig,
    style: DaoStyle,
    seed: u64,
    observer: &mut dyn StepObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let metrics = Metrics::new(task);
    let pi0_eval = task.pi0.eval();
    let mut policy = task.pi0.clone();
    let mut pit = policy.clone();
    let mut trace = Trace::new(match style {
        DaoStyle::Reinforce => "dao",
        DaoStyle::ImportanceSampled => "dao_is",
    });
    let (alpha, beta) = (config.alpha, config.beta);

    for step in 1..=config.steps {
        pit = policy.clone();
        let pit_eval = pit.eval();
        let pit_dists = distributions(&pit_eval, task.n_prompts());
        let mut loss = 0.0;
        let mut ratio = 1.0;
        match config.estimation {
            Estimation::Sampled => {
                let batch = build_batch(task, &pit_eval, &pi0_eval, config, &mut rng)?;
                let pairs: Vec<(usize, usize)> = batch.samples.iter().map(|s| (s.prompt, s.response)).collect();
                for _ in 0..config.updates_per_batch {
                    let theta = policy.eval();
                    let (obj, grad) = match style {
                        DaoStyle::Reinforce => {
                            let g = dao_reinforce_grad(&theta, &pi0_eval, &pit_eval, &pairs, &batch.norm_adv, alpha, beta)
                                .map_err(|e| aborted(step, e.to_string(), &trace))?;
                            (mean(&batch.norm_adv), g)
                        }
                        DaoStyle::ImportanceSampled => {
                            let ratios: Vec<f64> =
                                pairs.iter().map(|&(x, y)| (theta.log_prob(x, y) - pit_eval.log_prob(x, y)).exp()).collect();
                            ratio = mean(&ratios);
                            dao_is_objective(&theta, &pi0_eval, &pit_eval, &pairs, &batch.norm_adv, alpha, beta)
                                .map_err(|e| aborted(step, e.to_string(), &trace))?
                        }
                    };
                    check_loss(obj, step, &trace)?;
                    drop(theta);
                    apply_step(&mut policy, &grad, config.learning_rate, step, &trace)?;
                    loss = -obj;
                }
            }
            Estimation::Exact => {
                let adv = AdvantageTable::exact(&pit_dists, task.rewards.channel(RewardChannel::Proxy))?;
                for _ in 0..config.updates_per_batch {
                    let theta = policy.eval();
                    let (obj, grad) = dao_is_exact(&theta, metrics.pi0(), &pit_dists, &adv, &task.prompts, alpha, beta)?;
                    let grad = match style {
                        DaoStyle::Reinforce => {
                            dao_reinforce_exact_grad(&theta, metrics.pi0(), &pit_dists, &adv, &task.prompts, alpha, beta)?
                        }
                        DaoStyle::ImportanceSampled => grad,
                    };
                    check_loss(obj, step, &trace)?;
                    drop(theta);
                    apply_step(&mut policy, &grad, config.learning_rate, step, &trace)?;
                    loss = -obj;
                }
            }
        }
        trace.push(metrics.record(step, &policy, &pit_dists, ratio, 0.0, loss)?);
        observer.observe(step, &policy)?;
    }
    Ok(TrainOutcome { trace, final_policy: policy, last_pit: pit })
}
