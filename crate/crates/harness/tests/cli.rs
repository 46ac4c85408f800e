use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dar_core::envs::TaskSpec;
use dar_harness::algo::Algorithm;
use dar_harness::config::ExperimentConfig;
use dar_harness::run::{CellStatus, RunSummary};

fn dar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dar")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_named(dir: &Path, name: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_named(&p, name));
        } else if p.file_name().unwrap() == name {
            out.push(p);
        }
    }
    out
}

#[test]
fn single_seed_train_writes_one_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let out = dar(&["train", "--algorithm", "dar", "--task", "hackable", "--steps", "30", "--seeds", "3", "--output-dir", path(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let traces = files_named(&out_dir, "trace.csv");
    assert_eq!(traces, vec![out_dir.join("seed-3/trace.csv")]);
    let summary = RunSummary::read(&out_dir.join("summary.json")).unwrap();
    let text = std::fs::read_to_string(&traces[0]).unwrap();
    assert!(text.starts_with(&format!("# config_hash={} seed=3", summary.config_hash)));
    // Header plus one row per step.
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 31);
    for f in ["eval.csv", "final_policy.json", "pit_prev.json"] {
        assert!(out_dir.join("seed-3").join(f).exists(), "{f}");
    }
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().join("x");
    for args in [
        vec!["train", "--algorithm", "nope", "--task", "hackable"],
        vec!["train", "--algorithm", "dar"],
        vec!["train", "--algorithm", "rloo", "--task", "hackable", "--k-shot", "1", "--output-dir", path(&o)],
        vec!["train", "--algorithm", "dar", "--task", "hackable", "--alpha", "1.5", "--output-dir", path(&o)],
        vec!["sweep", "--algorithm", "dar", "--task", "hackable", "--param", "reg.no_such_field", "--values", "1,2"],
    ] {
        let out = dar(&args);
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(!o.exists());
}

#[test]
fn failed_cells_exit_with_one_and_keep_partial_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::new(TaskSpec::standard_bandit(), Algorithm::Dar);
    config.reg.w_clip = 1e300;
    config.reg.beta = 1e-6;
    config.reg.learning_rate = 1e300;
    config.reg.steps = 20;
    config.seeds = vec![0];
    let file = tmp.path().join("c.json");
    std::fs::write(&file, config.to_json()).unwrap();
    let out_dir = tmp.path().join("run");
    let out = dar(&["train", "--config", path(&file), "--output-dir", path(&out_dir)]);
    assert_eq!(code(&out), 1);
    let summary = RunSummary::read(&out_dir.join("summary.json")).unwrap();
    assert_eq!(summary.failures(), 1);
    assert!(matches!(&summary.cells[0].status, CellStatus::Failed { error } if !error.is_empty()));
    assert!(out_dir.join("seed-0/trace.csv").exists());
    assert!(!out_dir.join("seed-0/final_policy.json").exists());
}

#[test]
fn sweep_lays_out_value_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("sweep");
    let out = dar(&[
        "sweep", "--algorithm", "dar", "--task", "standard-bandit", "--steps", "20", "--seeds", "0,1", "--param", "beta",
        "--values", "0.1,0.5,2", "--output-dir", path(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for v in ["0.1", "0.5", "2"] {
        for s in [0, 1] {
            assert!(out_dir.join(format!("beta-{v}/seed-{s}/trace.csv")).exists(), "beta-{v}/seed-{s}");
        }
    }
    let summary = RunSummary::read(&out_dir.join("summary.json")).unwrap();
    assert_eq!(summary.groups.len(), 3);
    assert_eq!(summary.pareto.unwrap().points.len(), 6);
    assert!(out_dir.join("pareto.csv").exists());
}

#[test]
fn report_builds_tables_and_refuses_mixed_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&dar(&["train", "--algorithm", "dar", "--task", "hackable", "--steps", "20", "--seeds", "0", "--output-dir", path(&a)])), 0);
    assert_eq!(
        code(&dar(&["train", "--algorithm", "ppo", "--task", "standard-bandit", "--steps", "20", "--seeds", "0", "--output-dir", path(&b)])),
        0
    );

    let rep = tmp.path().join("rep");
    let out = dar(&["report", path(&a), "--output-dir", path(&rep)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(rep.join("table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("a,dar,,1,0,"));
    for f in ["reward_vs_step.csv", "win_rate_vs_step.csv", "reward_vs_kl.csv"] {
        assert!(rep.join(f).exists());
    }

    let mixed = tmp.path().join("mixed");
    assert_eq!(code(&dar(&["report", path(&a), path(&b), "--output-dir", path(&mixed)])), 2);
    assert!(!mixed.exists());
    assert_eq!(code(&dar(&["report", path(&tmp.path().join("missing")), "--output-dir", path(&mixed)])), 1);
}

#[test]
fn verify_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("verify.tsv");
    let out = dar(&["verify", "--output", path(&file)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&file).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "invariant\tseed\tdiscrepancy\ttolerance\tresult");
    assert!(lines.all(|l| l.ends_with("\tPASS")));
    assert!(String::from_utf8_lossy(&out.stdout).lines().all(|l| l.starts_with("PASS")));
}
