//! Synthetic alignment tasks: reward families, SFT-like initial policies and
//! reward-judged win rates.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{mean, pairwise_sum, population_std};
use crate::policy::{
    enumerate_responses, Distribution, Parametrization, PolicyEval, PromptSet, ResponseSpace,
    SequenceMode, TabularPolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardFamily {
    /// 1 for one seeded target response per prompt, 0 elsewhere.
    TargetMatch,
    /// Seeded noise plus a per-content-token bonus.
    LengthShaped,
    /// Proxy = true + bonus on responses ending in an exploit pattern.
    HackableProxy,
    /// Independent uniform rewards.
    RandomTable,
}

impl RewardFamily {
    /// Keys every task of this family must define, with their defaults.
    pub fn default_params(self) -> BTreeMap<String, f64> {
        let mut p: BTreeMap<String, f64> = [("rho", 0.3), ("pi0_temperature", 1.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let extra: &[(&str, f64)] = match self {
            RewardFamily::TargetMatch => &[],
            RewardFamily::LengthShaped => &[("per_token", 0.1), ("noise", 0.5)],
            RewardFamily::HackableProxy => &[
                ("bonus", 1.1),
                ("exploit_len", 1.0),
                ("exploit_true_scale", 0.0),
                ("exploit_logit_penalty", 4.5),
                ("reward_scale", 0.05),
            ],
            RewardFamily::RandomTable => &[("low", 0.0), ("high", 1.0)],
        };
        p.extend(extra.iter().map(|(k, v)| (k.to_string(), *v)));
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub vocab_size: usize,
    pub max_len: usize,
    pub prompt_count: usize,
    pub reward_family: RewardFamily,
    pub family_params: BTreeMap<String, f64>,
    pub seed: u64,
    #[serde(default)]
    pub mode: SequenceMode,
    #[serde(default)]
    pub parametrization: Parametrization,
}

impl TaskSpec {
    pub fn new(name: &str, family: RewardFamily, vocab_size: usize, max_len: usize, prompt_count: usize) -> Self {
        TaskSpec {
            name: name.to_string(),
            vocab_size,
            max_len,
            prompt_count,
            reward_family: family,
            family_params: family.default_params(),
            seed: 0,
            mode: SequenceMode::FixedLength,
            parametrization: Parametrization::Flat,
        }
    }

    /// One prompt, eight single-token responses with rewards spread over [0, 0.002].
    pub fn standard_bandit() -> Self {
        let mut spec = TaskSpec::new("standard_bandit", RewardFamily::RandomTable, 8, 1, 1);
        spec.family_params.insert("high".into(), 0.002);
        spec
    }

    /// Four prompts over vocab 4, length 3, with one trailing exploit token and
    /// a token-level policy whose initialization rarely emits it.
    pub fn hackable() -> Self {
        let mut spec = TaskSpec::new("hackable", RewardFamily::HackableProxy, 4, 3, 4);
        spec.parametrization = Parametrization::Autoregressive;
        spec.family_params.insert("pi0_temperature".into(), 0.3);
        spec
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.family_params.insert(key.to_string(), value);
        self
    }

    pub fn param(&self, key: &str) -> Result<f64> {
        self.family_params
            .get(key)
            .copied()
            .ok_or_else(|| Error::Config(format!("task '{}' is missing family parameter '{key}'", self.name)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_count == 0 {
            return Err(Error::Config("prompt_count must be >= 1".into()));
        }
        for key in self.reward_family.default_params().keys() {
            let v = self.param(key)?;
            if !v.is_finite() {
                return Err(Error::Config(format!("family parameter '{key}' is not finite")));
            }
        }
        let rho = self.param("rho")?;
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!("rho must lie in [-1, 1], got {rho}")));
        }
        if self.reward_family == RewardFamily::HackableProxy {
            let len = self.param("exploit_len")?;
            if len < 1.0 || len.fract() != 0.0 || len as usize > self.max_len {
                return Err(Error::Config(format!("exploit_len must be an integer in 1..={}", self.max_len)));
            }
            if self.param("bonus")? <= 0.0 || self.param("reward_scale")? <= 0.0 {
                return Err(Error::Config("bonus and reward_scale must be positive".into()));
            }
        }
        if self.reward_family == RewardFamily::RandomTable && self.param("low")? > self.param("high")? {
            return Err(Error::Config("random_table needs low <= high".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardChannel {
    #[default]
    True,
    Proxy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub true_reward: Vec<Vec<f64>>,
    pub proxy_reward: Vec<Vec<f64>>,
    /// Responses carrying the exploit pattern; empty unless hackable.
    pub exploit: Vec<Vec<bool>>,
}

impl RewardModel {
    pub fn channel(&self, channel: RewardChannel) -> &[Vec<f64>] {
        match channel {
            RewardChannel::True => &self.true_reward,
            RewardChannel::Proxy => &self.proxy_reward,
        }
    }

    pub fn reward(&self, channel: RewardChannel, prompt: usize, response: usize) -> f64 {
        self.channel(channel)[prompt][response]
    }
}

/// Everything an algorithm needs to train and be evaluated.
#[derive(Debug, Clone)]
pub struct Task {
    pub spec: TaskSpec,
    pub prompts: PromptSet,
    pub space: Arc<ResponseSpace>,
    pub rewards: RewardModel,
    pub pi0: TabularPolicy,
}

pub fn make_task(spec: &TaskSpec) -> Result<Task> {
    spec.validate()?;
    let space = Arc::new(enumerate_responses(spec.vocab_size, spec.max_len, spec.mode)?);
    let prompts = PromptSet::uniform(spec.prompt_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = space.len();
    let p = spec.prompt_count;

    let mut exploit = Vec::new();
    let (true_reward, proxy_reward) = match spec.reward_family {
        RewardFamily::TargetMatch => {
            let table: Vec<Vec<f64>> = (0..p)
                .map(|_| {
                    let target = rng.gen_range(0..n);
                    (0..n).map(|y| if y == target { 1.0 } else { 0.0 }).collect()
                })
                .collect();
            (table.clone(), table)
        }
        RewardFamily::RandomTable => {
            let (lo, hi) = (spec.param("low")?, spec.param("high")?);
            let table: Vec<Vec<f64>> = (0..p)
                .map(|_| (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect())
                .collect();
            (table.clone(), table)
        }
        RewardFamily::LengthShaped => {
            let (per_token, noise) = (spec.param("per_token")?, spec.param("noise")?);
            let table: Vec<Vec<f64>> = (0..p)
                .map(|_| {
                    (0..n)
                        .map(|y| noise * rng.gen::<f64>() + per_token * space.content_len(y) as f64)
                        .collect()
                })
                .collect();
            (table.clone(), table)
        }
        RewardFamily::HackableProxy => {
            let len = spec.param("exploit_len")? as usize;
            let bonus = spec.param("bonus")?;
            let true_scale = spec.param("exploit_true_scale")?;
            let scale = spec.param("reward_scale")?;
            let flags: Vec<bool> = (0..n).map(|y| has_exploit(&space, y, len)).collect();
            let mut truth = Vec::with_capacity(p);
            let mut proxy = Vec::with_capacity(p);
            for _ in 0..p {
                let base: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
                let t: Vec<f64> = base
                    .iter()
                    .zip(&flags)
                    .map(|(b, &e)| scale * if e { true_scale * b } else { *b })
                    .collect();
                let q: Vec<f64> = t
                    .iter()
                    .zip(&flags)
                    .map(|(v, &e)| if e { v + scale * bonus } else { *v })
                    .collect();
                truth.push(t);
                proxy.push(q);
                exploit.push(flags.clone());
            }
            (truth, proxy)
        }
    };

    let rho = spec.param("rho")?;
    let temperature = spec.param("pi0_temperature")?;
    let penalty = match spec.reward_family {
        RewardFamily::HackableProxy => spec.param("exploit_logit_penalty")?,
        _ => 0.0,
    };
    let mut logits = Vec::with_capacity(p);
    for x in 0..p {
        let r = &true_reward[x];
        let (mu, sd) = (mean(r), population_std(r));
        let row: Vec<f64> = (0..n)
            .map(|y| {
                let z = if sd > 0.0 { (r[y] - mu) / sd } else { 0.0 };
                let noise: f64 = rng.sample(StandardNormal);
                let hacked = exploit.get(x).is_some_and(|f| f[y]);
                temperature * (rho * z + (1.0 - rho * rho).sqrt() * noise) - if hacked { penalty } else { 0.0 }
            })
            .collect();
        logits.push(row);
    }
    let flat = TabularPolicy::from_flat_logits(space.clone(), logits)?;
    let pi0 = match spec.parametrization {
        Parametrization::Flat => flat,
        Parametrization::Autoregressive => flat.autoregressive_from_flat()?,
    };

    let rewards = RewardModel { true_reward, proxy_reward, exploit };
    if spec.reward_family == RewardFamily::HackableProxy {
        let disagree = (0..p)
            .filter(|&x| argmax(&rewards.true_reward[x]) != argmax(&rewards.proxy_reward[x]))
            .count();
        if 2 * disagree < p {
            return Err(Error::Config(format!(
                "hackable task '{}' flips the argmax on only {disagree} of {p} prompts",
                spec.name
            )));
        }
    }
    Ok(Task { spec: spec.clone(), prompts, space, rewards, pi0 })
}

/// True when the last `len` content tokens all equal the highest token id.
fn has_exploit(space: &ResponseSpace, response: usize, len: usize) -> bool {
    let content = space.content_len(response);
    if content < len {
        return false;
    }
    let tokens = &space.responses()[response][..content];
    let exploit_token = (space.vocab_size() - 1) as u32;
    tokens[content - len..].iter().all(|&t| t == exploit_token)
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl Task {
    pub fn n_prompts(&self) -> usize {
        self.prompts.len()
    }

    /// `pi0` as one distribution per prompt.
    pub fn pi0_distributions(&self) -> Vec<Distribution> {
        distributions(&self.pi0.eval(), self.n_prompts())
    }
}

pub fn distributions(eval: &PolicyEval<'_>, n_prompts: usize) -> Vec<Distribution> {
    (0..n_prompts).map(|x| eval.distribution(x)).collect()
}

/// Exact expected reward of `policy` at one prompt.
pub fn expected_reward(policy: &TabularPolicy, rewards: &RewardModel, channel: RewardChannel, prompt: usize) -> Result<f64> {
    policy.distribution(prompt)?.expectation(&rewards.channel(channel)[prompt])
}

/// Prompt-weighted expected reward from precomputed distributions.
pub fn mean_expected_reward(
    dists: &[Distribution],
    rewards: &RewardModel,
    channel: RewardChannel,
    prompts: &PromptSet,
) -> Result<f64> {
    let table = rewards.channel(channel);
    let terms = dists
        .iter()
        .enumerate()
        .map(|(x, d)| Ok(prompts.weight(x) * d.expectation(&table[x])?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&terms))
}

/// Exact `sum_x w(x) [P(r_a > r_b) + P(r_a = r_b) / 2]`, evaluated as
/// `1/2 + (P(r_a > r_b) - P(r_b > r_a)) / 2`.
pub fn win_rate_exact(
    a: &TabularPolicy,
    b: &TabularPolicy,
    rewards: &RewardModel,
    channel: RewardChannel,
    prompts: &PromptSet,
) -> Result<f64> {
    let da = distributions(&a.eval(), a.n_prompts());
    let db = distributions(&b.eval(), b.n_prompts());
    win_rate_from_distributions(&da, &db, rewards, channel, prompts)
}

pub fn win_rate_from_distributions(
    da: &[Distribution],
    db: &[Distribution],
    rewards: &RewardModel,
    channel: RewardChannel,
    prompts: &PromptSet,
) -> Result<f64> {
    if da.len() != prompts.len() || db.len() != prompts.len() {
        return Err(Error::Shape("win rate needs one distribution per prompt".into()));
    }
    let table = rewards.channel(channel);
    let mut terms = Vec::with_capacity(prompts.len());
    for x in 0..prompts.len() {
        let r = &table[x];
        let mut order: Vec<usize> = (0..r.len()).collect();
        order.sort_by(|&i, &j| r[i].total_cmp(&r[j]));
        let (pa, pb) = (da[x].probs(), db[x].probs());
        // P(a > b) and P(b > a) by the same expression, so swapping the
        // arguments swaps them bit for bit and a policy ties itself exactly.
        let (mut below_a, mut below_b) = (0.0, 0.0);
        let (mut wins, mut losses) = (Vec::new(), Vec::new());
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            let (mut ga, mut gb) = (0.0, 0.0);
            while j < order.len() && r[order[j]] == r[order[i]] {
                ga += pa[order[j]];
                gb += pb[order[j]];
                j += 1;
            }
            wins.push(ga * below_b);
            losses.push(gb * below_a);
            below_a += ga;
            below_b += gb;
            i = j;
        }
        let margin = pairwise_sum(&wins) - pairwise_sum(&losses);
        terms.push(prompts.weight(x) * (0.5 + 0.5 * margin));
    }
    Ok(pairwise_sum(&terms))
}

/// Monte-Carlo win rate over `n_pairs` sampled (prompt, a, b) triples.
pub fn win_rate_sampled(
    a: &TabularPolicy,
    b: &TabularPolicy,
    rewards: &RewardModel,
    channel: RewardChannel,
    prompts: &PromptSet,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(Error::Parameter("n_pairs must be >= 1".into()));
    }
    let (ea, eb) = (a.eval(), b.eval());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = rewards.channel(channel);
    let mut score = 0.0;
    for _ in 0..n_pairs {
        let x = prompts.sample(&mut rng);
        let ya = ea.sample_k(x, 1, &mut rng)[0];
        let yb = eb.sample_k(x, 1, &mut rng)[0];
        let (ra, rb) = (table[x][ya], table[x][yb]);
        score += if ra > rb {
            1.0
        } else if ra == rb {
            0.5
        } else {
            0.0
        };
    }
    Ok(score / n_pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_match_is_an_indicator() {
        let task = make_task(&TaskSpec::new("t", RewardFamily::TargetMatch, 4, 3, 2)).unwrap();
        for row in &task.rewards.true_reward {
            assert_eq!(row.iter().filter(|r| **r == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|r| **r == 0.0).count(), 63);
        }
        let uniform = TabularPolicy::uniform(task.space.clone(), 2, Parametrization::Flat).unwrap();
        let v = expected_reward(&uniform, &task.rewards, RewardChannel::True, 0).unwrap();
        assert!((v - 1.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn missing_parameter_is_named() {
        let mut spec = TaskSpec::new("t", RewardFamily::HackableProxy, 4, 3, 4);
        spec.family_params.remove("bonus");
        match make_task(&spec) {
            Err(Error::Config(msg)) => assert!(msg.contains("bonus")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hackable_default_flips_argmax() {
        let task = make_task(&TaskSpec::hackable()).unwrap();
        let flips = (0..4)
            .filter(|&x| argmax(&task.rewards.true_reward[x]) != argmax(&task.rewards.proxy_reward[x]))
            .count();
        assert!(flips >= 2);
    }

    #[test]
    fn extreme_point_masses_win_outright() {
        let task = make_task(&TaskSpec::new("t", RewardFamily::RandomTable, 3, 1, 1)).unwrap();
        let r = &task.rewards.true_reward[0];
        let (hi, lo) = (argmax(r), argmax(&r.iter().map(|v| -v).collect::<Vec<_>>()));
        let mass = |i: usize| {
            let mut l = vec![-30.0; 3];
            l[i] = 30.0;
            TabularPolicy::from_flat_logits(task.space.clone(), vec![l]).unwrap()
        };
        let w = win_rate_exact(&mass(hi), &mass(lo), &task.rewards, RewardChannel::True, &task.prompts).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
    }
}
