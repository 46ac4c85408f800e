//! Experiment configuration files and named-parameter overrides.

use std::path::{Path, PathBuf};

use dar_core::baselines::PPOConfig;
use dar_core::dar::RegConfig;
use dar_core::envs::TaskSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::algo::Algorithm;
use crate::{HarnessError, Result};

/// Environment variable naming the output root when `output_dir` is unset.
pub const OUTPUT_ROOT_ENV: &str = "DARLAB_OUTPUT_ROOT";

/// The default beta grid for DAR sweeps.
pub const DAR_BETA_GRID: [f64; 4] = [0.05, 0.1, 0.3, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub parameter: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub reg: RegConfig,
    #[serde(default)]
    pub ppo: PPOConfig,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_eval_every() -> usize {
    50
}

impl ExperimentConfig {
    pub fn new(task: TaskSpec, algorithm: Algorithm) -> Self {
        ExperimentConfig {
            task,
            algorithm,
            reg: RegConfig::default(),
            ppo: PPOConfig::default(),
            seeds: vec![0],
            sweep: None,
            output_dir: None,
            eval_every: default_eval_every(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config file: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        if self.eval_every == 0 {
            return Err(HarnessError::Config("eval_every must be >= 1".into()));
        }
        self.task.validate()?;
        self.reg.validate()?;
        self.ppo.validate()?;
        self.algorithm.check(self)?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(HarnessError::Config("sweep needs at least one value".into()));
            }
            for &v in &sweep.values {
                let mut probe = self.clone();
                probe.sweep = None;
                probe.set_param(&sweep.parameter, v)?;
                probe.validate()?;
            }
        }
        Ok(())
    }

    /// Sets a numeric field by name. `beta` and `alpha` address the
    /// regularization of the configured algorithm, `k`, `k_shot` and `w_clip`
    /// address `reg`, anything else must be a dotted path such as
    /// `task.family_params.bonus` or `ppo.kl_lambda`.
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        let path = match name {
            "beta" if self.algorithm.is_ppo_family() => "ppo.shaping_beta",
            "alpha" if self.algorithm.is_ppo_family() => "ppo.alpha",
            "beta" => "reg.beta",
            "alpha" => "reg.alpha",
            "k" | "k_shot" => "reg.k",
            "w_clip" => "reg.w_clip",
            other => other,
        };
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut root;
        for part in path.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| HarnessError::Config(format!("unknown config parameter '{name}'")))?;
        }
        *slot = match slot {
            Value::Number(n) if n.is_u64() || n.is_i64() => {
                if value.fract() != 0.0 || value < 0.0 {
                    return Err(HarnessError::Config(format!("parameter '{name}' needs a nonnegative integer, got {value}")));
                }
                Value::from(value as u64)
            }
            Value::Number(_) | Value::Null => Value::from(value),
            _ => return Err(HarnessError::Config(format!("parameter '{name}' is not numeric"))),
        };
        *self = serde_json::from_value(root).map_err(|e| HarnessError::Config(format!("parameter '{name}': {e}")))?;
        Ok(())
    }

    /// SHA-256 of the configuration without its output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// `output_dir`, else `$DARLAB_OUTPUT_ROOT/<algorithm>-<hash prefix>`, else under `runs/`.
    pub fn resolve_output_dir(&self) -> PathBuf {
        if let Some(dir) = &self.output_dir {
            return dir.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!("{}-{}", self.algorithm.name(), &self.hash()[..12]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ExperimentConfig {
        ExperimentConfig::new(TaskSpec::standard_bandit(), Algorithm::Dar)
    }

    #[test]
    fn named_parameters_route_to_the_algorithm() {
        let mut c = config();
        c.set_param("beta", 0.3).unwrap();
        c.set_param("k_shot", 2.0).unwrap();
        c.set_param("task.family_params.high", 0.5).unwrap();
        assert_eq!((c.reg.beta, c.reg.k, c.task.family_params["high"]), (0.3, 2, 0.5));
        let mut p = ExperimentConfig::new(TaskSpec::standard_bandit(), Algorithm::DualPpo);
        p.set_param("beta", 0.02).unwrap();
        assert_eq!((p.ppo.shaping_beta, p.reg.beta), (0.02, RegConfig::default().beta));
    }

    #[test]
    fn bad_parameters_are_config_errors() {
        let mut c = config();
        assert!(c.set_param("reg.nope", 1.0).unwrap_err().is_config());
        assert!(c.set_param("k", 1.5).unwrap_err().is_config());
        assert!(c.set_param("task.name", 1.0).unwrap_err().is_config());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let mut c = config();
        let h = c.hash();
        c.output_dir = Some("elsewhere".into());
        assert_eq!(h, c.hash());
        c.reg.beta = 0.1;
        assert_ne!(h, c.hash());
    }
}
