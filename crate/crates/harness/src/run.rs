//! Running an experiment: one cell per (sweep value, seed), executed in
//! parallel, each writing its own files, followed by an atomic summary.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use dar_core::envs::{make_task, win_rate_exact, RewardChannel, Task};
use dar_core::policy::{PolicySnapshot, TabularPolicy};
use dar_core::trace::{Trace, TrainOutcome};
use dar_core::train::mean_kl;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algo::{kl_measure, Algorithm};
use crate::config::ExperimentConfig;
use crate::pareto::{pareto, ParetoPoint, ParetoResult};
use crate::stats::{summarize, Summary};
use crate::{HarnessError, Result};

pub const EVAL_COLUMNS: [&str; 6] =
    ["step", "expected_true_reward", "expected_proxy_reward", "kl_to_pi0", "win_rate_vs_pi0", "kl_measure"];

/// Final metrics aggregated across seeds, in summary order.
pub const METRICS: [&str; 5] = ["final_true_reward", "final_proxy_reward", "kl_to_pi0", "kl_measure", "win_rate_vs_pi0"];

/// One evaluation row; rewards and win rate are exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub expected_true_reward: f64,
    pub expected_proxy_reward: f64,
    pub kl_to_pi0: f64,
    pub win_rate_vs_pi0: f64,
    /// Same selector as the Pareto axis, with the previous step's policy as `pit`.
    pub kl_measure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Ok { metrics: BTreeMap<String, f64> },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_value: Option<f64>,
    /// Directory of the cell relative to the run directory.
    pub dir: String,
    pub beta: f64,
    pub alpha: f64,
    /// Relative path of the `pit` snapshot the dual KL measure used.
    pub pit_snapshot: String,
    pub pit_snapshot_step: usize,
    #[serde(flatten)]
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_value: Option<f64>,
    pub ok: usize,
    pub failed: usize,
    pub metrics: BTreeMap<String, Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub algorithm: Algorithm,
    pub task: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_parameter: Option<String>,
    pub cells: Vec<CellSummary>,
    pub groups: Vec<GroupSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pareto: Option<ParetoResult>,
}

impl RunSummary {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| matches!(c.status, CellStatus::Failed { .. })).count()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| HarnessError::Parse { what: path.display().to_string(), message: e.to_string() })
    }
}

/// Policy snapshot file with its provenance fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotFile {
    pub config_hash: String,
    pub seed: u64,
    pub step: usize,
    pub policy: PolicySnapshot,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: RunSummary,
}

struct Cell {
    seed: u64,
    sweep_value: Option<f64>,
    config: ExperimentConfig,
    dir: String,
}

fn cells(config: &ExperimentConfig) -> Result<Vec<Cell>> {
    let mut out = Vec::new();
    let values: Vec<Option<f64>> = match &config.sweep {
        Some(s) => s.values.iter().map(|v| Some(*v)).collect(),
        None => vec![None],
    };
    for value in values {
        let mut cell_config = config.clone();
        cell_config.sweep = None;
        let prefix = match (value, &config.sweep) {
            (Some(v), Some(s)) => {
                cell_config.set_param(&s.parameter, v)?;
                format!("{}-{v}/", s.parameter)
            }
            _ => String::new(),
        };
        for &seed in &config.seeds {
            out.push(Cell { seed, sweep_value: value, config: cell_config.clone(), dir: format!("{prefix}seed-{seed}") });
        }
    }
    Ok(out)
}

/// Whether a sweep parameter name addresses the beta of `algorithm`.
pub fn is_beta_parameter(algorithm: Algorithm, name: &str) -> bool {
    name == "beta" || name == if algorithm.is_ppo_family() { "ppo.shaping_beta" } else { "reg.beta" }
}

pub fn header(hash: &str, seed: u64) -> String {
    format!("config_hash={hash} seed={seed}")
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

/// Writes through a temporary file in the same directory and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| HarnessError::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| HarnessError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| HarnessError::io(path, e.error))?;
    Ok(())
}

pub fn eval_csv(records: &[EvalRecord], comment: &str) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(EVAL_COLUMNS).expect("in-memory write");
    for r in records {
        w.serialize(r).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8");
    format!("# {comment}\n{body}")
}

/// Exact evaluation of `policy` against the task's `pi0`.
pub fn evaluate(
    algorithm: Algorithm,
    alpha: f64,
    task: &Task,
    step: usize,
    policy: &TabularPolicy,
    prev: &TabularPolicy,
) -> Result<EvalRecord> {
    let dists = dar_core::envs::distributions(&policy.eval(), task.n_prompts());
    let reward = |c| dar_core::envs::mean_expected_reward(&dists, &task.rewards, c, &task.prompts);
    Ok(EvalRecord {
        step,
        expected_true_reward: reward(RewardChannel::True)?,
        expected_proxy_reward: reward(RewardChannel::Proxy)?,
        kl_to_pi0: mean_kl(&dists, &task.pi0_distributions(), &task.prompts)?,
        win_rate_vs_pi0: win_rate_exact(policy, &task.pi0, &task.rewards, RewardChannel::True, &task.prompts)?,
        kl_measure: kl_measure(algorithm, alpha, task, policy, prev)?,
    })
}

struct CellRun {
    outcome: TrainOutcome,
    evals: Vec<EvalRecord>,
}

fn train_cell(cell: &Cell) -> Result<CellRun, (HarnessError, Option<Trace>, Vec<EvalRecord>)> {
    let config = &cell.config;
    let algorithm = config.algorithm;
    let alpha = algorithm.alpha(config);
    let task = make_task(&config.task).map_err(|e| (e.into(), None, Vec::new()))?;
    let steps = config.reg.steps;
    let every = config.eval_every;
    let mut evals = Vec::new();
    let mut prev = task.pi0.clone();
    match evaluate(algorithm, alpha, &task, 0, &task.pi0, &prev) {
        Ok(r) => evals.push(r),
        Err(e) => return Err((e, None, evals)),
    }
    let result = {
        let mut observer = |step: usize, policy: &TabularPolicy| -> dar_core::Result<()> {
            if step.is_multiple_of(every) || step == steps {
                let record = evaluate(algorithm, alpha, &task, step, policy, &prev)
                    .map_err(|e| dar_core::Error::Evaluation(e.to_string()))?;
                evals.push(record);
            }
            prev = policy.clone();
            Ok(())
        };
        algorithm.train(&task, config, cell.seed, &mut observer)
    };
    match result {
        Ok(outcome) => Ok(CellRun { outcome, evals }),
        Err(HarnessError::Core(dar_core::Error::TrainingAborted { step, reason, trace })) => {
            let err = HarnessError::Core(dar_core::Error::TrainingAborted { step, reason, trace: trace.clone() });
            Err((err, Some(*trace), evals))
        }
        Err(e) => Err((e, None, evals)),
    }
}

fn run_cell(cell: &Cell, root: &Path, hash: &str) -> Result<CellSummary> {
    let config = &cell.config;
    let algorithm = config.algorithm;
    let dir = root.join(&cell.dir);
    let comment = header(hash, cell.seed);
    let mut summary = CellSummary {
        seed: cell.seed,
        sweep_value: cell.sweep_value,
        dir: cell.dir.clone(),
        beta: algorithm.beta(config),
        alpha: algorithm.alpha(config),
        pit_snapshot: format!("{}/pit_prev.json", cell.dir),
        pit_snapshot_step: config.reg.steps.saturating_sub(1),
        status: CellStatus::Failed { error: String::new() },
    };
    let run = match train_cell(cell) {
        Ok(run) => run,
        Err((err, trace, evals)) => {
            if let Some(trace) = trace {
                write_file(&dir.join("trace.csv"), trace.to_csv(std::slice::from_ref(&comment)).as_bytes())?;
            }
            write_file(&dir.join("eval.csv"), eval_csv(&evals, &comment).as_bytes())?;
            summary.status = CellStatus::Failed { error: err.to_string() };
            return Ok(summary);
        }
    };
    let TrainOutcome { trace, final_policy, last_pit } = run.outcome;
    write_file(&dir.join("trace.csv"), trace.to_csv(std::slice::from_ref(&comment)).as_bytes())?;
    write_file(&dir.join("eval.csv"), eval_csv(&run.evals, &comment).as_bytes())?;
    let steps = config.reg.steps;
    for (name, policy, step) in [("final_policy.json", &final_policy, steps), ("pit_prev.json", &last_pit, steps.saturating_sub(1))] {
        let file = SnapshotFile { config_hash: hash.to_string(), seed: cell.seed, step, policy: PolicySnapshot::from_policy(policy) };
        let text = serde_json::to_string_pretty(&file).expect("snapshot serializes");
        write_file(&dir.join(name), text.as_bytes())?;
    }

    let task = make_task(&config.task)?;
    let last = run.evals.last().expect("final evaluation recorded");
    let measure = kl_measure(algorithm, summary.alpha, &task, &final_policy, &last_pit)?;
    let values = [last.expected_true_reward, last.expected_proxy_reward, last.kl_to_pi0, measure, last.win_rate_vs_pi0];
    let metrics = METRICS.iter().map(|m| m.to_string()).zip(values).collect();
    summary.status = CellStatus::Ok { metrics };
    Ok(summary)
}

fn group(cells: &[CellSummary]) -> Vec<GroupSummary> {
    let mut keys: Vec<Option<f64>> = Vec::new();
    for c in cells {
        if !keys.iter().any(|k| k.map(f64::to_bits) == c.sweep_value.map(f64::to_bits)) {
            keys.push(c.sweep_value);
        }
    }
    keys.into_iter()
        .map(|key| {
            let members: Vec<&CellSummary> =
                cells.iter().filter(|c| c.sweep_value.map(f64::to_bits) == key.map(f64::to_bits)).collect();
            let ok: Vec<&BTreeMap<String, f64>> = members
                .iter()
                .filter_map(|c| match &c.status {
                    CellStatus::Ok { metrics } => Some(metrics),
                    CellStatus::Failed { .. } => None,
                })
                .collect();
            let metrics = METRICS
                .iter()
                .map(|m| (m.to_string(), summarize(&ok.iter().map(|o| o[*m]).collect::<Vec<_>>())))
                .collect();
            GroupSummary { sweep_value: key, ok: ok.len(), failed: members.len() - ok.len(), metrics }
        })
        .collect()
}

/// Pareto points from the successful cells of a beta sweep.
pub fn pareto_points(summary: &RunSummary) -> Vec<ParetoPoint> {
    summary
        .cells
        .iter()
        .filter_map(|c| match &c.status {
            CellStatus::Ok { metrics } => Some(ParetoPoint {
                beta: c.beta,
                final_reward: metrics["final_true_reward"],
                kl_measure: metrics["kl_measure"],
                seed: c.seed,
            }),
            CellStatus::Failed { .. } => None,
        })
        .collect()
}

pub fn pareto_csv(points: &[ParetoPoint], comment: &str) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["beta", "final_reward", "kl_measure", "seed"]).expect("in-memory write");
    for p in points {
        w.serialize(p).expect("in-memory write");
    }
    format!("# {comment}\n{}", String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8"))
}

/// Runs every cell, writes per-cell files under `dir` and the summary last.
pub fn run_experiment_in(config: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    config.validate()?;
    let hash = config.hash();
    let cells = cells(config)?;
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_atomic(&dir.join("config.json"), config.to_json().as_bytes())?;
    let results: Vec<CellSummary> = cells.par_iter().map(|c| run_cell(c, dir, &hash)).collect::<Result<_>>()?;

    let mut summary = RunSummary {
        config_hash: hash.clone(),
        algorithm: config.algorithm,
        task: config.task.name.clone(),
        sweep_parameter: config.sweep.as_ref().map(|s| s.parameter.clone()),
        groups: group(&results),
        cells: results,
        pareto: None,
    };
    if let Some(sweep) = &config.sweep {
        if is_beta_parameter(config.algorithm, &sweep.parameter) && sweep.values.len() >= 3 {
            let result = pareto(pareto_points(&summary));
            write_atomic(&dir.join("pareto.csv"), pareto_csv(&result.points, &format!("config_hash={hash}")).as_bytes())?;
            summary.pareto = Some(result);
        }
    }
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&dir.join("summary.json"), text.as_bytes())?;
    Ok(RunOutput { dir: dir.to_path_buf(), summary })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    run_experiment_in(config, &config.resolve_output_dir())
}

/// A beta sweep with at least three values and its fitted frontier.
pub fn pareto_sweep(config: &ExperimentConfig) -> Result<(RunOutput, ParetoResult)> {
    match &config.sweep {
        Some(s) if is_beta_parameter(config.algorithm, &s.parameter) && s.values.len() >= 3 => {}
        _ => return Err(HarnessError::Config("a Pareto sweep needs a beta sweep with at least 3 values".into())),
    }
    let out = run_experiment(config)?;
    let result = out.summary.pareto.clone().expect("beta sweep produces a frontier");
    Ok((out, result))
}
