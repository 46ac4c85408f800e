//! JSON policy snapshots. `serde_json` prints floats in shortest round-trip
//! form, so a write/read cycle reproduces logits bit for bit.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::space::{enumerate_responses, ResponseSpace, SequenceMode};
use super::tabular::{Parametrization, TabularPolicy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub mode: Parametrization,
    #[serde(default)]
    pub sequence_mode: SequenceMode,
    pub vocab_size: usize,
    pub max_len: usize,
    pub prompts: usize,
    /// One entry per softmax row: `[prompt][response]` when flat,
    /// `[prompt * rows_per_prompt + context][token]` when autoregressive.
    pub logits: Vec<Vec<f64>>,
}

impl PolicySnapshot {
    pub fn from_policy(policy: &TabularPolicy) -> Self {
        let space = policy.space();
        let mut logits = Vec::with_capacity(policy.n_prompts() * policy.rows_per_prompt());
        for x in 0..policy.n_prompts() {
            for row in 0..policy.rows_per_prompt() {
                logits.push(policy.logits()[policy.row_range(x, row)].to_vec());
            }
        }
        PolicySnapshot {
            mode: policy.parametrization(),
            sequence_mode: space.mode(),
            vocab_size: space.vocab_size(),
            max_len: space.max_len(),
            prompts: policy.n_prompts(),
            logits,
        }
    }

    /// Rebuilds the policy, enumerating a fresh response space.
    pub fn to_policy(&self) -> Result<TabularPolicy> {
        let space = Arc::new(enumerate_responses(self.vocab_size, self.max_len, self.sequence_mode)?);
        self.to_policy_in(space)
    }

    /// Rebuilds the policy over an existing response space.
    pub fn to_policy_in(&self, space: Arc<ResponseSpace>) -> Result<TabularPolicy> {
        if space.vocab_size() != self.vocab_size
            || space.max_len() != self.max_len
            || space.mode() != self.sequence_mode
        {
            return Err(Error::Snapshot("snapshot does not match the response space".into()));
        }
        let template = TabularPolicy::zeros(space.clone(), self.prompts, self.mode)?;
        if self.logits.len() != self.prompts * template.rows_per_prompt() {
            return Err(Error::Snapshot(format!(
                "{} logit rows, expected {}",
                self.logits.len(),
                self.prompts * template.rows_per_prompt()
            )));
        }
        let mut flat = Vec::with_capacity(template.num_params());
        for (i, row) in self.logits.iter().enumerate() {
            let want = template.row_range(i / template.rows_per_prompt(), i % template.rows_per_prompt()).len();
            if row.len() != want {
                return Err(Error::Snapshot(format!("row {i} has {} logits, expected {want}", row.len())));
            }
            flat.extend_from_slice(row);
        }
        TabularPolicy::from_parts(space, self.prompts, self.mode, flat)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let space = Arc::new(enumerate_responses(2, 2, SequenceMode::EndToken).unwrap());
        let logits: Vec<f64> = (0..space.len()).map(|i| (i as f64 * 0.1).sin() / 3.0).collect();
        let p = TabularPolicy::from_flat_logits(space.clone(), vec![logits]).unwrap();
        let ar = p.autoregressive_from_flat().unwrap();
        for policy in [p, ar] {
            let snap = PolicySnapshot::from_policy(&policy);
            let back = PolicySnapshot::from_json(&snap.to_json().unwrap()).unwrap().to_policy().unwrap();
            assert_eq!(back.logits(), policy.logits());
            assert_eq!(back.parametrization(), policy.parametrization());
        }
    }

    #[test]
    fn rejects_ragged_rows() {
        let snap = PolicySnapshot {
            mode: Parametrization::Flat,
            sequence_mode: SequenceMode::FixedLength,
            vocab_size: 2,
            max_len: 1,
            prompts: 1,
            logits: vec![vec![0.0]],
        };
        assert!(matches!(snap.to_policy(), Err(Error::Snapshot(_))));
    }
}
