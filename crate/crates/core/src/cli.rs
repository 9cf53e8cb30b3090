//! Command-line front end.
//!
//! Every subcommand reads one TOML configuration (all keys optional), applies
//! `--seed` and `--out` on top of it, prints the SHA-256 of the effective
//! configuration to stderr and writes its output file.
//!
//! Exit codes: 0 on success, 2 for configuration and input-file errors,
//! 1 for failures during a run.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evaluation;
use crate::io::{self, ExperimentConfig, Metric, ResultRecord};
use crate::learning::{self, TrainingRun};
use crate::policy::Policy;

#[derive(Debug, Parser)]
#[command(name = "betaips", version, about = "Baseline-corrected off-policy estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic environment and write a logged dataset CSV.
    Simulate(CommonArgs),
    /// Train policies from logged data and write per-epoch results.
    Train(CommonArgs),
    /// Run the replicated off-policy evaluation grid and write MSE results.
    Ope(CommonArgs),
    /// Select BanditNet's lambda on held-out data and write per-lambda learning curves.
    Sweep(CommonArgs),
    /// Apply estimators to a logged dataset file and a policy file.
    Evaluate(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML configuration file; built-in defaults are used when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output file, overriding `output.path`.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Seed, overriding the configuration's `seed`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for parallel runs.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Train(_) => "train",
            Command::Ope(_) => "ope",
            Command::Sweep(_) => "sweep",
            Command::Evaluate(_) => "evaluate",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Simulate(a) | Command::Train(a) | Command::Ope(a) | Command::Sweep(a) | Command::Evaluate(a) => a,
        }
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(log::LevelFilter::Warn)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
    let name = cli.command.name();
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("betaips {name}: {e}");
            if e.is_config_error() {
                2
            } else {
                1
            }
        }
    }
}

fn effective_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &args.out {
        cfg.output.path = Some(out.clone());
    }
    Ok(cfg)
}

fn run(command: &Command) -> Result<()> {
    let args = command.args();
    let cfg = effective_config(args)?;
    eprintln!("config sha256: {}", cfg.digest()?);
    let body = || match command {
        Command::Simulate(_) => simulate(&cfg),
        Command::Train(_) => train(&cfg),
        Command::Ope(_) => ope(&cfg),
        Command::Sweep(_) => sweep(&cfg),
        Command::Evaluate(_) => evaluate(&cfg),
    };
    match args.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build()
            .map_err(|e| Error::Config(format!("--threads {n}: {e}")))?
            .install(body),
        None => body(),
    }
}

fn output_path(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.output
        .path
        .as_deref()
        .ok_or_else(|| Error::Config("no output file: pass --out PATH or set output.path".into()))
}

fn simulate(cfg: &ExperimentConfig) -> Result<()> {
    let out = output_path(cfg)?;
    let (data, _) = learning::training_setup(&cfg.environment, cfg.seed, 1)?;
    io::write_dataset(out, &data)
}

fn write_policies(dir: &Path, runs: &[TrainingRun]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for run in runs {
        let name = run.report.mode.to_string().replace('=', "_");
        io::write_policy(&dir.join(format!("{name}-seed{}.csv", run.seed)), &run.report.policy)?;
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig) -> Result<()> {
    let out = output_path(cfg)?;
    let runs = learning::run_training_experiment(&cfg.environment, &cfg.optimizer, &cfg.training, cfg.seed)?;
    io::write_results(out, &io::training_records("train", &cfg.environment, &runs))?;
    if let Some(dir) = &cfg.output.policy_dir {
        write_policies(dir, &runs)?;
    }
    for mode in &cfg.training.estimators {
        let finals: Vec<f64> = runs
            .iter()
            .filter(|r| &r.report.mode == mode)
            .map(|r| r.report.final_value())
            .collect();
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        println!("{mode}: mean final test value {mean:.6} over {} runs", finals.len());
    }
    Ok(())
}

fn ope(cfg: &ExperimentConfig) -> Result<()> {
    let out = output_path(cfg)?;
    let rows = evaluation::run_ope_experiment(&cfg.ope)?;
    for row in rows.iter().filter(|r| r.fallbacks > 0) {
        log::warn!(
            "{} at K={} tau={} n={}: baseline fell back to 0 in {} of {} replications",
            row.estimator,
            row.k_actions,
            row.inv_temperature,
            row.n_logged,
            row.fallbacks,
            row.replications
        );
    }
    io::write_results(out, &io::ope_records("ope", cfg.seed, &rows))
}

fn sweep(cfg: &ExperimentConfig) -> Result<()> {
    let out = output_path(cfg)?;
    let (data, oracle) = learning::training_setup(&cfg.environment, cfg.seed, cfg.sweep.test_contexts)?;
    let result = learning::lambda_sweep(&data, &cfg.sweep.lambdas, &cfg.optimizer, &oracle)?;
    let runs: Vec<TrainingRun> = result
        .runs
        .iter()
        .map(|r| TrainingRun {
            seed: cfg.seed,
            report: r.report.clone(),
        })
        .collect();
    io::write_results(out, &io::training_records("sweep", &cfg.environment, &runs))?;
    for run in &result.runs {
        println!("lambda {}: held-out SNIPS value {:.6}", run.lambda, run.validation_value);
    }
    println!("best lambda: {}", result.best_lambda);
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let missing = |key: &str| Error::Config(format!("evaluate needs `evaluate.{key}` in the config"));
    let dataset_path = cfg.evaluate.dataset.as_deref().ok_or_else(|| missing("dataset"))?;
    let policy_path = cfg.evaluate.policy.as_deref().ok_or_else(|| missing("policy"))?;
    let reference = cfg.evaluate.reference_value.ok_or_else(|| missing("reference_value"))?;
    let policy = io::read_policy(policy_path)?;
    let data = io::read_dataset(dataset_path)?;
    let estimates = evaluation::evaluate_on_dataset(&data, &policy, &cfg.evaluate.estimators, reference)?;
    println!("estimator,value,rel_abs_error");
    for e in &estimates {
        println!("{},{},{}", e.estimator, e.value, e.relative_absolute_error);
    }
    if let Some(out) = &cfg.output.path {
        let record = |estimator: &str, metric_name, metric_value| ResultRecord {
            experiment: "evaluate".into(),
            estimator: estimator.to_string(),
            seed: cfg.seed,
            epoch: None,
            k_actions: policy.num_actions(),
            inv_temperature: f64::NAN,
            n_logged: data.len(),
            metric_name,
            metric_value,
        };
        let mut records = Vec::new();
        for e in &estimates {
            records.push(record(&e.estimator, Metric::RelAbsError, e.relative_absolute_error));
            if let Some(beta) = e.beta_used {
                records.push(record(&e.estimator, Metric::BetaUsed, beta));
            }
        }
        io::write_results(out, &records)?;
    }
    Ok(())
}
