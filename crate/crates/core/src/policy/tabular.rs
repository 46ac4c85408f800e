//! Softmax policies over an enumerated response space.
//!
//! Both parametrizations store their logits as a sequence of softmax rows.
//! A flat policy has one row per prompt spanning every response. An
//! autoregressive policy has one row per (prompt, content-token prefix), so a
//! response is a path of (row, token) steps whose log-probabilities add up.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dist::Distribution;
use super::prompts::sample_index;
use super::space::{ResponseSpace, SequenceMode, Token};
use crate::error::{Error, Result};
use crate::numeric::{log_softmax, log_sum_exp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    #[default]
    Flat,
    Autoregressive,
}

/// Row structure shared by every policy with the same space and parametrization.
#[derive(Debug)]
struct Layout {
    /// Start of each local row within a prompt's block, plus a final end marker.
    row_offsets: Vec<usize>,
    /// Per response, the (local row, column) steps that generate it.
    paths: Vec<Vec<(u32, u32)>>,
}

impl Layout {
    fn flat(space: &ResponseSpace) -> Self {
        Layout {
            row_offsets: vec![0, space.len()],
            paths: (0..space.len()).map(|r| vec![(0, r as u32)]).collect(),
        }
    }

    fn autoregressive(space: &ResponseSpace) -> Self {
        let v = space.vocab_size();
        let mut row_offsets = vec![0];
        for len in 0..space.max_len() {
            let width = context_width(space, len);
            for _ in 0..v.pow(len as u32) {
                let last = *row_offsets.last().unwrap();
                row_offsets.push(last + width);
            }
        }
        let paths = space
            .responses()
            .iter()
            .map(|tokens| {
                tokens
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| (context_row(v, &tokens[..i]) as u32, t))
                    .collect()
            })
            .collect();
        Layout { row_offsets, paths }
    }

    fn rows_per_prompt(&self) -> usize {
        self.row_offsets.len() - 1
    }

    fn params_per_prompt(&self) -> usize {
        *self.row_offsets.last().unwrap()
    }
}

/// Number of choices after a content prefix of length `len`.
fn context_width(space: &ResponseSpace, len: usize) -> usize {
    match space.mode() {
        SequenceMode::FixedLength => space.vocab_size(),
        SequenceMode::EndToken if len == 0 => space.vocab_size(),
        SequenceMode::EndToken => space.vocab_size() + 1,
    }
}

/// Local row of a content prefix: rows are grouped by prefix length, then
/// ordered by the prefix read as a base-`vocab` number.
fn context_row(vocab: usize, prefix: &[Token]) -> usize {
    let shorter: usize = (0..prefix.len()).map(|l| vocab.pow(l as u32)).sum();
    let within = prefix.iter().fold(0usize, |acc, &t| acc * vocab + t as usize);
    shorter + within
}

/// Per-prompt logit table; see the module docs for the row structure.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    param: Parametrization,
    space: Arc<ResponseSpace>,
    n_prompts: usize,
    layout: Arc<Layout>,
    logits: Vec<f64>,
}

impl TabularPolicy {
    /// All-zero logits, which is uniform over responses only in flat mode.
    pub fn zeros(space: Arc<ResponseSpace>, n_prompts: usize, param: Parametrization) -> Result<Self> {
        if n_prompts == 0 {
            return Err(Error::Parameter("a policy needs at least one prompt".into()));
        }
        let layout = Arc::new(match param {
            Parametrization::Flat => Layout::flat(&space),
            Parametrization::Autoregressive => Layout::autoregressive(&space),
        });
        let logits = vec![0.0; n_prompts * layout.params_per_prompt()];
        Ok(TabularPolicy {
            param,
            space,
            n_prompts,
            layout,
            logits,
        })
    }

    /// Uniform distribution over responses in either parametrization.
    pub fn uniform(space: Arc<ResponseSpace>, n_prompts: usize, param: Parametrization) -> Result<Self> {
        let flat = Self::zeros(space, n_prompts, Parametrization::Flat)?;
        match param {
            Parametrization::Flat => Ok(flat),
            Parametrization::Autoregressive => flat.autoregressive_from_flat(),
        }
    }

    /// Flat policy from a `[prompt][response]` logit table.
    pub fn from_flat_logits(space: Arc<ResponseSpace>, logits: Vec<Vec<f64>>) -> Result<Self> {
        let mut policy = Self::zeros(space, logits.len(), Parametrization::Flat)?;
        let n = policy.space.len();
        for (x, row) in logits.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape(format!(
                    "prompt {x} has {} logits, expected {n}",
                    row.len()
                )));
            }
            policy.logits[x * n..(x + 1) * n].copy_from_slice(row);
        }
        policy.check_finite()?;
        Ok(policy)
    }

    /// Policy with the given parameter vector in the layout of `param`.
    pub fn from_parts(
        space: Arc<ResponseSpace>,
        n_prompts: usize,
        param: Parametrization,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let mut policy = Self::zeros(space, n_prompts, param)?;
        if logits.len() != policy.logits.len() {
            return Err(Error::Shape(format!(
                "{} logits given, layout needs {}",
                logits.len(),
                policy.logits.len()
            )));
        }
        policy.logits = logits;
        policy.check_finite()?;
        Ok(policy)
    }

    fn check_finite(&self) -> Result<()> {
        match self.logits.iter().position(|l| !l.is_finite()) {
            Some(i) => Err(Error::Evaluation(format!("logit {i} is not finite"))),
            None => Ok(()),
        }
    }

    pub fn parametrization(&self) -> Parametrization {
        self.param
    }

    pub fn space(&self) -> &Arc<ResponseSpace> {
        &self.space
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Replaces the parameter vector; lengths must match.
    pub fn set_logits(&mut self, logits: &[f64]) -> Result<()> {
        if logits.len() != self.logits.len() {
            return Err(Error::Shape(format!(
                "{} logits given, layout needs {}",
                logits.len(),
                self.logits.len()
            )));
        }
        self.logits.copy_from_slice(logits);
        Ok(())
    }

    /// `logits += scale * direction`, rejecting non-finite results.
    pub fn step(&mut self, direction: &[f64], scale: f64) -> Result<()> {
        if direction.len() != self.logits.len() {
            return Err(Error::Shape("update direction has the wrong length".into()));
        }
        for (l, d) in self.logits.iter_mut().zip(direction) {
            *l += scale * d;
        }
        self.check_finite()
    }

    /// Number of softmax rows per prompt.
    pub fn rows_per_prompt(&self) -> usize {
        self.layout.rows_per_prompt()
    }

    /// Parameter range of one softmax row.
    pub fn row_range(&self, prompt: usize, local_row: usize) -> std::ops::Range<usize> {
        let base = prompt * self.layout.params_per_prompt();
        base + self.layout.row_offsets[local_row]..base + self.layout.row_offsets[local_row + 1]
    }

    /// True when both policies index the same parameters.
    pub fn same_layout(&self, other: &TabularPolicy) -> bool {
        self.param == other.param && self.n_prompts == other.n_prompts && *self.space == *other.space
    }

    pub(crate) fn check_prompt(&self, prompt: usize) -> Result<()> {
        if prompt < self.n_prompts {
            Ok(())
        } else {
            Err(Error::index("prompt", prompt, self.n_prompts))
        }
    }

    pub(crate) fn check_response(&self, response: usize) -> Result<()> {
        if response < self.space.len() {
            Ok(())
        } else {
            Err(Error::index("response", response, self.space.len()))
        }
    }

    /// Log-softmax of every row, for repeated queries against fixed logits.
    pub fn eval(&self) -> PolicyEval<'_> {
        let mut lsm = vec![0.0; self.logits.len()];
        for x in 0..self.n_prompts {
            for row in 0..self.rows_per_prompt() {
                let range = self.row_range(x, row);
                let ls = log_softmax(&self.logits[range.clone()]);
                lsm[range].copy_from_slice(&ls);
            }
        }
        PolicyEval { policy: self, lsm }
    }

    pub fn log_prob(&self, prompt: usize, response: usize) -> Result<f64> {
        self.check_prompt(prompt)?;
        self.check_response(response)?;
        let base = prompt * self.layout.params_per_prompt();
        let mut total = 0.0;
        for &(row, col) in &self.layout.paths[response] {
            let range = self.row_range(prompt, row as usize);
            let lse = log_sum_exp(&self.logits[range.clone()]);
            total += self.logits[range.start + col as usize] - lse;
            debug_assert!(range.start >= base);
        }
        Ok(total)
    }

    pub fn distribution(&self, prompt: usize) -> Result<Distribution> {
        self.check_prompt(prompt)?;
        Ok(self.eval().distribution(prompt))
    }

    /// `k` i.i.d. responses for `prompt`.
    pub fn sample_k<R: Rng + ?Sized>(&self, prompt: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
        self.check_prompt(prompt)?;
        if k == 0 {
            return Err(Error::Parameter("k must be >= 1".into()));
        }
        Ok(self.eval().sample_k(prompt, k, rng))
    }

    /// Flat policy with the same response distribution.
    pub fn flat_from_autoregressive(&self) -> Result<TabularPolicy> {
        if self.param != Parametrization::Autoregressive {
            return Err(Error::Parameter("policy is not autoregressive".into()));
        }
        let eval = self.eval();
        let rows = (0..self.n_prompts).map(|x| eval.log_probs(x)).collect();
        TabularPolicy::from_flat_logits(self.space.clone(), rows)
    }

    /// Autoregressive policy whose token conditionals reproduce this flat
    /// policy's response distribution.
    pub fn autoregressive_from_flat(&self) -> Result<TabularPolicy> {
        if self.param != Parametrization::Flat {
            return Err(Error::Parameter("policy is not flat".into()));
        }
        let space = self.space.clone();
        let mut out = TabularPolicy::zeros(space.clone(), self.n_prompts, Parametrization::Autoregressive)?;
        let eval = self.eval();
        let mut prefix = Vec::with_capacity(space.max_len());
        for x in 0..self.n_prompts {
            let lp = eval.log_probs(x);
            prefix.clear();
            fill_conditionals(&space, &lp, &mut out, x, &mut prefix);
        }
        out.check_finite()?;
        Ok(out)
    }
}

/// Log-mass of all responses extending `prefix`; writes the conditional
/// log-probabilities of the prefix's row along the way.
fn fill_conditionals(
    space: &ResponseSpace,
    log_probs: &[f64],
    out: &mut TabularPolicy,
    prompt: usize,
    prefix: &mut Vec<Token>,
) -> f64 {
    if prefix.len() == space.max_len() {
        return log_probs[space.index_of(prefix).expect("full-length prefix is a response")];
    }
    let v = space.vocab_size();
    let mut children = Vec::with_capacity(v + 1);
    for t in 0..v as Token {
        prefix.push(t);
        children.push(fill_conditionals(space, log_probs, out, prompt, prefix));
        prefix.pop();
    }
    if let Some(eos) = space.end_token() {
        if !prefix.is_empty() {
            prefix.push(eos);
            children.push(log_probs[space.index_of(prefix).expect("terminated prefix is a response")]);
            prefix.pop();
        }
    }
    let mass = log_sum_exp(&children);
    let range = out.row_range(prompt, context_row(v, prefix));
    for (slot, child) in out.logits[range].iter_mut().zip(&children) {
        *slot = child - mass;
    }
    mass
}

/// A policy with every row's log-softmax precomputed.
#[derive(Debug, Clone)]
pub struct PolicyEval<'a> {
    policy: &'a TabularPolicy,
    lsm: Vec<f64>,
}

impl<'a> PolicyEval<'a> {
    pub fn policy(&self) -> &'a TabularPolicy {
        self.policy
    }

    fn steps(&self, prompt: usize, response: usize) -> impl Iterator<Item = (std::ops::Range<usize>, usize)> + '_ {
        self.policy.layout.paths[response].iter().map(move |&(row, col)| {
            let range = self.policy.row_range(prompt, row as usize);
            let at = range.start + col as usize;
            (range, at)
        })
    }

    /// Log-probability of a response. Indices are trusted.
    pub fn log_prob(&self, prompt: usize, response: usize) -> f64 {
        self.steps(prompt, response).map(|(_, at)| self.lsm[at]).sum()
    }

    /// Log-probabilities of the generating steps: one per token in
    /// autoregressive mode, a single whole-response step in flat mode.
    pub fn token_log_probs(&self, prompt: usize, response: usize) -> Vec<f64> {
        self.steps(prompt, response).map(|(_, at)| self.lsm[at]).collect()
    }

    pub fn num_steps(&self, response: usize) -> usize {
        self.policy.layout.paths[response].len()
    }

    pub fn log_probs(&self, prompt: usize) -> Vec<f64> {
        match self.policy.param {
            Parametrization::Flat => self.lsm[self.policy.row_range(prompt, 0)].to_vec(),
            Parametrization::Autoregressive => (0..self.policy.space.len())
                .map(|r| self.log_prob(prompt, r))
                .collect(),
        }
    }

    pub fn distribution(&self, prompt: usize) -> Distribution {
        Distribution::from_log_probs_unchecked(self.log_probs(prompt))
    }

    /// `grad += coef * d log pi(response | prompt) / d logits`.
    pub fn add_log_prob_grad(&self, prompt: usize, response: usize, coef: f64, grad: &mut [f64]) {
        for (range, at) in self.steps(prompt, response) {
            add_row_grad(&self.lsm, range, at, coef, grad);
        }
    }

    /// Gradient of a single step's log-probability.
    pub fn add_step_log_prob_grad(
        &self,
        prompt: usize,
        response: usize,
        step: usize,
        coef: f64,
        grad: &mut [f64],
    ) {
        if let Some((range, at)) = self.steps(prompt, response).nth(step) {
            add_row_grad(&self.lsm, range, at, coef, grad);
        }
    }

    pub fn sample_k<R: Rng + ?Sized>(&self, prompt: usize, k: usize, rng: &mut R) -> Vec<usize> {
        match self.policy.param {
            Parametrization::Flat => {
                let probs: Vec<f64> = self.lsm[self.policy.row_range(prompt, 0)]
                    .iter()
                    .map(|l| l.exp())
                    .collect();
                (0..k).map(|_| sample_index(&probs, rng)).collect()
            }
            Parametrization::Autoregressive => (0..k).map(|_| self.sample_sequence(prompt, rng)).collect(),
        }
    }

    fn sample_sequence<R: Rng + ?Sized>(&self, prompt: usize, rng: &mut R) -> usize {
        let space = &self.policy.space;
        let v = space.vocab_size();
        let mut tokens: Vec<Token> = Vec::with_capacity(space.max_len() + 1);
        while tokens.len() < space.max_len() {
            let range = self.policy.row_range(prompt, context_row(v, &tokens));
            let probs: Vec<f64> = self.lsm[range].iter().map(|l| l.exp()).collect();
            let t = sample_index(&probs, rng) as Token;
            tokens.push(t);
            if Some(t) == space.end_token() {
                break;
            }
        }
        space.index_of(&tokens).expect("sampled path is a response")
    }
}

fn add_row_grad(lsm: &[f64], range: std::ops::Range<usize>, at: usize, coef: f64, grad: &mut [f64]) {
    for j in range {
        grad[j] -= coef * lsm[j].exp();
    }
    grad[at] += coef;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::space::enumerate_responses;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space(v: usize, l: usize, mode: SequenceMode) -> Arc<ResponseSpace> {
        Arc::new(enumerate_responses(v, l, mode).unwrap())
    }

    #[test]
    fn uniform_flat_log_prob() {
        let p = TabularPolicy::uniform(space(4, 1, SequenceMode::FixedLength), 1, Parametrization::Flat).unwrap();
        assert!((p.log_prob(0, 2).unwrap() - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hand_softmax() {
        let s = space(2, 1, SequenceMode::FixedLength);
        let p = TabularPolicy::from_flat_logits(s, vec![vec![0.0, 3f64.ln()]]).unwrap();
        assert!((p.log_prob(0, 1).unwrap() - 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn autoregressive_zeros_are_uniform() {
        let p = TabularPolicy::zeros(space(2, 2, SequenceMode::FixedLength), 1, Parametrization::Autoregressive)
            .unwrap();
        for r in 0..4 {
            assert!((p.log_prob(0, r).unwrap() - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn end_token_uniform_conversion_round_trips() {
        let s = space(2, 3, SequenceMode::EndToken);
        let ar = TabularPolicy::uniform(s.clone(), 2, Parametrization::Autoregressive).unwrap();
        let d = ar.distribution(1).unwrap();
        for p in d.probs() {
            assert!((p - 1.0 / s.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn index_errors() {
        let p = TabularPolicy::uniform(space(2, 1, SequenceMode::FixedLength), 1, Parametrization::Flat).unwrap();
        assert!(matches!(p.log_prob(1, 0), Err(Error::Index { .. })));
        assert!(matches!(p.log_prob(0, 2), Err(Error::Index { .. })));
    }

    #[test]
    fn sampling_is_seeded() {
        let s = space(3, 2, SequenceMode::EndToken);
        let p = TabularPolicy::uniform(s, 1, Parametrization::Autoregressive).unwrap();
        let a = p.sample_k(0, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = p.sample_k(0, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_non_finite_logits() {
        let s = space(2, 1, SequenceMode::FixedLength);
        assert!(TabularPolicy::from_flat_logits(s, vec![vec![0.0, f64::NAN]]).is_err());
    }
}
