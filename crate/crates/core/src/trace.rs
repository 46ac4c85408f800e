//! Per-step training records and their delimiter-separated text form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::policy::TabularPolicy;

pub const TRACE_COLUMNS: [&str; 9] = [
    "step",
    "variant",
    "expected_true_reward",
    "expected_proxy_reward",
    "kl_to_pi0",
    "kl_to_pit_prev",
    "mean_w_final",
    "clip_fraction",
    "loss",
];

/// Metrics after the update of one step. KLs are prompt-weighted averages;
/// `kl_to_pit_prev` compares against the snapshot the step started from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub expected_true_reward: f64,
    pub expected_proxy_reward: f64,
    pub kl_to_pi0: f64,
    pub kl_to_pit_prev: f64,
    pub mean_w_final: f64,
    pub clip_fraction: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub variant: String,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(variant: &str) -> Self {
        Trace { variant: variant.to_string(), records: Vec::new() }
    }

    pub fn push(&mut self, record: TraceRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.step < record.step));
        self.records.push(record);
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Comma-separated text with a header row, optionally preceded by `# `
    /// comment lines. Floats use shortest round-trip formatting.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            let _ = writeln!(out, "# {c}");
        }
        out.push_str(&TRACE_COLUMNS.join(","));
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                self.variant,
                r.expected_true_reward,
                r.expected_proxy_reward,
                r.kl_to_pi0,
                r.kl_to_pit_prev,
                r.mean_w_final,
                r.clip_fraction,
                r.loss
            );
        }
        out
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Trace,
    pub final_policy: TabularPolicy,
    /// The `pit` snapshot taken before the last update.
    pub last_pit: TabularPolicy,
}
