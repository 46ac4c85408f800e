//! Algorithm identifiers, training dispatch and the Pareto x-axis selector.

use dar_core::baselines::{
    dao_train_observed, group_pg_train_observed, iter_sft_train_observed, ppo_train_observed, DaoStyle,
    GroupEstimator, PpoVariant,
};
use dar_core::dar::dar_train_observed;
use dar_core::envs::{distributions, Task};
use dar_core::policy::TabularPolicy;
use dar_core::trace::TrainOutcome;
use dar_core::train::{mean_kl, StepObserver};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Dar,
    Dao,
    DaoIs,
    Ppo,
    PpoPenalty,
    PpoAlign,
    DualPpo,
    DualPpoClip,
    DualMixPpo,
    Rloo,
    Grpo,
    /// Best-of-`reg.k` selection with one SFT step per batch.
    IterSft,
}

impl Algorithm {
    pub const ALL: [Algorithm; 12] = [
        Algorithm::Dar,
        Algorithm::Dao,
        Algorithm::DaoIs,
        Algorithm::Ppo,
        Algorithm::PpoPenalty,
        Algorithm::PpoAlign,
        Algorithm::DualPpo,
        Algorithm::DualPpoClip,
        Algorithm::DualMixPpo,
        Algorithm::Rloo,
        Algorithm::Grpo,
        Algorithm::IterSft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Dar => "dar",
            Algorithm::Dao => "dao",
            Algorithm::DaoIs => "dao_is",
            Algorithm::Rloo => "rloo",
            Algorithm::Grpo => "grpo",
            Algorithm::IterSft => "iter_sft",
            other => other.ppo_variant().expect("ppo family").name(),
        }
    }

    pub fn parse(name: &str) -> Option<Algorithm> {
        Algorithm::ALL.into_iter().find(|a| a.name() == name)
    }

    pub fn ppo_variant(self) -> Option<PpoVariant> {
        Some(match self {
            Algorithm::Ppo => PpoVariant::Ppo,
            Algorithm::PpoPenalty => PpoVariant::PpoPenalty,
            Algorithm::PpoAlign => PpoVariant::Align,
            Algorithm::DualPpo => PpoVariant::Dual,
            Algorithm::DualPpoClip => PpoVariant::DualClip,
            Algorithm::DualMixPpo => PpoVariant::DualMix,
            _ => return None,
        })
    }

    pub fn is_ppo_family(self) -> bool {
        self.ppo_variant().is_some()
    }

    /// Algorithms regularized toward both `pi0` and the previous policy.
    pub fn is_dual(self) -> bool {
        matches!(
            self,
            Algorithm::Dar | Algorithm::Dao | Algorithm::DaoIs | Algorithm::DualPpo | Algorithm::DualPpoClip | Algorithm::DualMixPpo
        )
    }

    /// The interpolation weight used for the dual KL measure.
    pub fn alpha(self, config: &ExperimentConfig) -> f64 {
        if self.is_ppo_family() {
            config.ppo.alpha
        } else {
            config.reg.alpha
        }
    }

    /// The regularization strength a beta sweep varies.
    pub fn beta(self, config: &ExperimentConfig) -> f64 {
        if self.is_ppo_family() {
            config.ppo.shaping_beta
        } else {
            config.reg.beta
        }
    }

    /// Checks constraints that only some algorithms impose.
    pub fn check(self, config: &ExperimentConfig) -> Result<()> {
        if matches!(self, Algorithm::Rloo | Algorithm::Grpo) && config.reg.k < 2 {
            return Err(HarnessError::Config(format!("{} needs k >= 2", self.name())));
        }
        Ok(())
    }

    pub fn train(self, task: &Task, config: &ExperimentConfig, seed: u64, observer: &mut dyn StepObserver) -> Result<TrainOutcome> {
        let reg = &config.reg;
        let out = match self {
            Algorithm::Dar => dar_train_observed(task, reg, seed, observer),
            Algorithm::Dao => dao_train_observed(task, reg, DaoStyle::Reinforce, seed, observer),
            Algorithm::DaoIs => dao_train_observed(task, reg, DaoStyle::ImportanceSampled, seed, observer),
            Algorithm::Rloo => group_pg_train_observed(task, reg, GroupEstimator::Rloo, seed, observer),
            Algorithm::Grpo => group_pg_train_observed(task, reg, GroupEstimator::Grpo, seed, observer),
            Algorithm::IterSft => iter_sft_train_observed(task, reg, reg.k, seed, observer),
            other => {
                let variant = other.ppo_variant().expect("ppo family");
                ppo_train_observed(task, reg, &config.ppo, variant, seed, observer)
            }
        };
        Ok(out?)
    }
}

/// Pareto x-axis: `alpha KL(pi || pi0) + (1 - alpha) KL(pi || pit)` for dual
/// algorithms and plain `KL(pi || pi0)` otherwise, prompt-weighted.
pub fn kl_measure(
    algorithm: Algorithm,
    alpha: f64,
    task: &Task,
    policy: &TabularPolicy,
    last_pit: &TabularPolicy,
) -> Result<f64> {
    let n = task.n_prompts();
    let pi = distributions(&policy.eval(), n);
    let kl0 = mean_kl(&pi, &task.pi0_distributions(), &task.prompts)?;
    if !algorithm.is_dual() {
        return Ok(kl0);
    }
    let klt = mean_kl(&pi, &distributions(&last_pit.eval(), n), &task.prompts)?;
    Ok(alpha * kl0 + (1.0 - alpha) * klt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dar_core::envs::{make_task, TaskSpec};

    #[test]
    fn names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(Algorithm::parse(a.name()), Some(a));
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
        }
    }

    #[test]
    fn kl_measure_selects_by_family() {
        let task = make_task(&TaskSpec::standard_bandit()).unwrap();
        let mut policy = task.pi0.clone();
        policy.step(&[1.0, 0.0, -1.0, 0.5, 0.0, 0.0, 0.2, 0.0], 1.0).unwrap();
        let mut pit = task.pi0.clone();
        pit.step(&[0.5, 0.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.3], 1.0).unwrap();
        let pi = policy.distribution(0).unwrap();
        let kl0 = dar_core::policy::kl_divergence(&pi, &task.pi0.distribution(0).unwrap()).unwrap();
        let klt = dar_core::policy::kl_divergence(&pi, &pit.distribution(0).unwrap()).unwrap();
        assert!(kl0 > 0.0 && klt > 0.0 && (kl0 - klt).abs() > 1e-3);

        let plain = kl_measure(Algorithm::PpoPenalty, 0.1, &task, &policy, &pit).unwrap();
        assert!((plain - kl0).abs() < 1e-15);
        let dual = kl_measure(Algorithm::Dar, 0.1, &task, &policy, &pit).unwrap();
        assert!((dual - (0.1 * kl0 + 0.9 * klt)).abs() < 1e-15);
    }
}
