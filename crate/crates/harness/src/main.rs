use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dar_core::envs::TaskSpec;
use dar_harness::algo::Algorithm;
use dar_harness::config::{ExperimentConfig, Sweep};
use dar_harness::run::{run_experiment, RunOutput};
use dar_harness::verify::{verify_all, Scale};
use dar_harness::{report, HarnessError, Result};

#[derive(Parser)]
#[command(name = "dar", version, about = "Train, sweep, verify and compare dual-regularized policy optimizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration over its seeds.
    Train(ExperimentArgs),
    /// Train every value of a parameter sweep over the seeds.
    Sweep {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Parameter to sweep (`beta`, `alpha`, `k`, `w_clip` or a dotted config path).
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated sweep values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Run the invariant suite and write a tab-separated report.
    Verify {
        #[arg(long, value_enum, default_value_t = ScaleArg::Quick)]
        scale: ScaleArg,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare finished runs on a shared task.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        output_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Quick,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskPreset {
    StandardBandit,
    Hackable,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Algorithm when no config file is given.
    #[arg(long)]
    algorithm: Option<String>,
    /// Built-in task when no config file is given.
    #[arg(long, value_enum)]
    task: Option<TaskPreset>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    k_shot: Option<f64>,
    #[arg(long)]
    w_clip: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ExperimentArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::read(path)?,
            None => {
                let name = self.algorithm.as_deref().ok_or_else(|| {
                    HarnessError::Config("either --config or both --algorithm and --task are required".into())
                })?;
                let algorithm =
                    Algorithm::parse(name).ok_or_else(|| HarnessError::Config(format!("unknown algorithm '{name}'")))?;
                let task = match self.task {
                    Some(TaskPreset::StandardBandit) => TaskSpec::standard_bandit(),
                    Some(TaskPreset::Hackable) => TaskSpec::hackable(),
                    None => return Err(HarnessError::Config("--task is required without --config".into())),
                };
                ExperimentConfig::new(task, algorithm)
            }
        };
        if self.config.is_some() && self.algorithm.is_some() {
            let name = self.algorithm.as_deref().unwrap();
            config.algorithm =
                Algorithm::parse(name).ok_or_else(|| HarnessError::Config(format!("unknown algorithm '{name}'")))?;
        }
        for (name, value) in [("alpha", self.alpha), ("beta", self.beta), ("k", self.k_shot), ("w_clip", self.w_clip)] {
            if let Some(v) = value {
                config.set_param(name, v)?;
            }
        }
        if !self.seeds.is_empty() {
            config.seeds = self.seeds.clone();
        }
        if let Some(steps) = self.steps {
            config.reg.steps = steps;
        }
        if self.output_dir.is_some() {
            config.output_dir = self.output_dir.clone();
        }
        Ok(config)
    }
}

fn finish_run(out: RunOutput) -> ExitCode {
    let s = &out.summary;
    println!("run directory: {}", out.dir.display());
    for g in &s.groups {
        let r = &g.metrics["final_true_reward"];
        let kl = &g.metrics["kl_measure"];
        let label = g.sweep_value.map(|v| format!("{}={v} ", s.sweep_parameter.as_deref().unwrap_or("value"))).unwrap_or_default();
        println!(
            "{label}true reward {:.6} ± {:.6}, kl measure {:.6} ± {:.6} ({} ok, {} failed)",
            r.mean, r.ci95, kl.mean, kl.ci95, g.ok, g.failed
        );
    }
    if let Some(p) = &s.pareto {
        match &p.fit {
            Some(f) => println!("fitted peak reward {:.6} at kl {:.6}; 95% of peak reached at kl {:.6}", f.peak_reward, f.peak_kl, f.kl_at_95),
            None => println!("frontier fit unavailable (KL values do not determine a quadratic)"),
        }
    }
    if s.failures() > 0 {
        eprintln!("{} of {} cells failed; see summary.json", s.failures(), s.cells.len());
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let mut config = args.build()?;
            config.sweep = None;
            config.validate()?;
            Ok(finish_run(run_experiment(&config)?))
        }
        Command::Sweep { experiment, param, values } => {
            let mut config = experiment.build()?;
            match (param, values.is_empty()) {
                (Some(parameter), false) => config.sweep = Some(Sweep { parameter, values }),
                (Some(parameter), true) if parameter == "beta" && config.algorithm == Algorithm::Dar => {
                    config.sweep = Some(Sweep { parameter, values: dar_harness::config::DAR_BETA_GRID.to_vec() })
                }
                (None, true) => {}
                _ => return Err(HarnessError::Config("--param and --values go together".into())),
            }
            if config.sweep.is_none() {
                return Err(HarnessError::Config("sweep needs a sweep block in the config or --param/--values".into()));
            }
            config.validate()?;
            Ok(finish_run(run_experiment(&config)?))
        }
        Command::Verify { scale, output } => {
            let report = verify_all(match scale {
                ScaleArg::Quick => Scale::Quick,
                ScaleArg::Full => Scale::Full,
            });
            match output {
                Some(path) => {
                    dar_harness::run::write_atomic(&path, report.to_tsv().as_bytes())?;
                    print!("{}", report.digest());
                }
                None => print!("{}", report.to_tsv()),
            }
            let failures = report.failures();
            for f in &failures {
                eprintln!("FAIL {} seed={} discrepancy={:e} tolerance={:e}", f.invariant, f.seed, f.discrepancy, f.tolerance);
            }
            Ok(if failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Report { runs, output_dir } => {
            for path in report::report(&runs, &output_dir)? {
                println!("{}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
