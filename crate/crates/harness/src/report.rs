//! Comparison tables and curve files across finished runs of one task.

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::run::{write_atomic, CellStatus, EvalRecord, RunSummary, METRICS};
use crate::{HarnessError, Result};

pub struct LoadedRun {
    pub label: String,
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub summary: RunSummary,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let config = ExperimentConfig::read(&dir.join("config.json"))?;
    let summary = RunSummary::read(&dir.join("summary.json"))?;
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(LoadedRun { label, dir: dir.to_path_buf(), config, summary })
}

pub fn read_eval(path: &Path) -> Result<Vec<EvalRecord>> {
    let parse = |e: csv::Error| HarnessError::Parse { what: path.display().to_string(), message: e.to_string() };
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(parse)?;
    reader.deserialize().map(|r| r.map_err(parse)).collect()
}

/// Files written by [`report`], relative to its output directory.
pub const REPORT_FILES: [&str; 4] = ["table.csv", "reward_vs_step.csv", "win_rate_vs_step.csv", "reward_vs_kl.csv"];

fn table_header() -> Vec<String> {
    let mut h: Vec<String> = ["run", "algorithm", "sweep_value", "ok", "failed"].map(String::from).to_vec();
    for m in METRICS {
        h.push(format!("{m}_mean"));
        h.push(format!("{m}_ci95"));
    }
    h
}

fn csv_text(comment: &str, header: &[String], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    format!("# {comment}\n{}", String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Loads every run, refuses runs on different tasks and writes the table
/// and curve files into `out`. Returns the written paths.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(HarnessError::Config("report needs at least one run directory".into()));
    }
    let runs: Vec<LoadedRun> = run_dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    let first = &runs[0];
    for r in &runs[1..] {
        if r.config.task != first.config.task {
            return Err(HarnessError::Config(format!(
                "runs '{}' and '{}' use different tasks ('{}' vs '{}' or differing parameters); refusing to compare",
                first.label, r.label, first.config.task.name, r.config.task.name
            )));
        }
    }
    let hashes: Vec<&str> = runs.iter().map(|r| r.summary.config_hash.as_str()).collect();
    let comment = format!("config_hashes={} task={}", hashes.join(","), first.config.task.name);

    let mut table = Vec::new();
    let mut reward_curve = Vec::new();
    let mut win_curve = Vec::new();
    let mut kl_rows = Vec::new();
    for run in &runs {
        let algo = run.summary.algorithm.name();
        for g in &run.summary.groups {
            let mut row = vec![run.label.clone(), algo.to_string(), opt(g.sweep_value), g.ok.to_string(), g.failed.to_string()];
            for m in METRICS {
                let s = &g.metrics[m];
                row.push(s.mean.to_string());
                row.push(s.ci95.to_string());
            }
            table.push(row);
        }
        for cell in &run.summary.cells {
            let prefix = vec![run.label.clone(), algo.to_string(), opt(cell.sweep_value), cell.seed.to_string()];
            let eval_path = run.dir.join(&cell.dir).join("eval.csv");
            if eval_path.exists() {
                for e in read_eval(&eval_path)? {
                    let mut r = prefix.clone();
                    r.extend([e.step.to_string(), e.expected_true_reward.to_string(), e.expected_proxy_reward.to_string()]);
                    reward_curve.push(r);
                    let mut w = prefix.clone();
                    w.extend([e.step.to_string(), e.win_rate_vs_pi0.to_string()]);
                    win_curve.push(w);
                }
            }
            if let CellStatus::Ok { metrics } = &cell.status {
                let mut r = prefix.clone();
                r.extend([cell.beta.to_string(), metrics["kl_measure"].to_string(), metrics["final_true_reward"].to_string()]);
                kl_rows.push(r);
            }
        }
    }

    let cols = |extra: &[&str]| -> Vec<String> {
        ["run", "algorithm", "sweep_value", "seed"].iter().chain(extra).map(|s| s.to_string()).collect()
    };
    let files = [
        csv_text(&comment, &table_header(), table),
        csv_text(&comment, &cols(&["step", "expected_true_reward", "expected_proxy_reward"]), reward_curve),
        csv_text(&comment, &cols(&["step", "win_rate_vs_pi0"]), win_curve),
        csv_text(&comment, &cols(&["beta", "kl_measure", "final_true_reward"]), kl_rows),
    ];
    let mut written = Vec::new();
    for (name, text) in REPORT_FILES.iter().zip(files) {
        let path = out.join(name);
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
