//! `affagg`: config-driven experiments for aggregation of affine estimators.

mod config;
mod experiments;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::Parser;
use serde::Serialize;

use config::{Experiment, ExperimentConfig};
use experiments::{Check, Ctx, Invalid};

const REPORT_SCHEMA: &str = "affagg.report/1";

#[derive(Debug, Parser)]
#[command(name = "affagg", version, about = "Aggregation of affine estimators: experiments and checks")]
struct Cli {
    /// `list`, or an experiment name optionally preceded by `run`.
    #[arg(required = true, num_args = 1..=2, value_name = "EXPERIMENT")]
    target: Vec<String>,
    /// JSON config merged over the experiment defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set noise.sigma=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "affagg-out", value_name = "DIR")]
    out: PathBuf,
    /// Seed used when neither `--seed` nor the config sets one.
    #[arg(long, env = "AFFAGG_SEED", hide = true)]
    env_seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct RunReport {
    schema: &'static str,
    version: String,
    experiment: &'static str,
    started_at: u64,
    wall_time_secs: f64,
    seed: u64,
    threads: usize,
    pass: bool,
    config: Option<ExperimentConfig>,
    checks: Vec<Check>,
    outputs: Vec<String>,
    summary: serde_json::Value,
    error: Option<String>,
}

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

fn target(cli: &Cli) -> Result<Option<Experiment>, anyhow::Error> {
    let name = match cli.target.as_slice() {
        [one] if one == "list" => return Ok(None),
        [one] => one,
        [run, one] if run == "run" => one,
        _ => anyhow::bail!("expected `list`, `<experiment>` or `run <experiment>`"),
    };
    Experiment::from_name(name).map(Some).ok_or_else(|| {
        let names: Vec<_> = Experiment::ALL.iter().map(|e| e.name()).collect();
        anyhow::anyhow!("unknown experiment {name:?}; expected one of {}", names.join(", "))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let exp = match target(&cli) {
        Ok(Some(e)) => e,
        Ok(None) => {
            print!("{}", config::list_experiments());
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let started = Instant::now();
    let started_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut report = RunReport {
        schema: REPORT_SCHEMA,
        version: format!("affagg {}", env!("CARGO_PKG_VERSION")),
        experiment: exp.name(),
        started_at,
        wall_time_secs: 0.0,
        seed: 0,
        threads: 0,
        pass: false,
        config: None,
        checks: Vec::new(),
        outputs: Vec::new(),
        summary: serde_json::Value::Null,
        error: None,
    };
    let result = execute(exp, &cli, &mut report);
    report.wall_time_secs = started.elapsed().as_secs_f64();
    let code = match result {
        Ok(()) => {
            for c in &report.checks {
                println!("{}: {} ({})", c.name, if c.pass { "PASS" } else { "FAIL" }, c.detail);
            }
            report.pass = report.checks.iter().all(|c| c.pass);
            if report.pass {
                ExitCode::SUCCESS
            } else {
                for c in report.checks.iter().filter(|c| !c.pass) {
                    eprintln!("{} failed: {}", exp.name(), c.name);
                }
                ExitCode::from(1)
            }
        }
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            report.error = Some(format!("{e:#}"));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            report.error = Some(format!("{e:#}"));
            ExitCode::from(1)
        }
    };
    if let Err(e) = write_report(&cli, &report) {
        eprintln!("error: cannot write report: {e:#}");
    }
    code
}

fn execute(exp: Experiment, cli: &Cli, report: &mut RunReport) -> Result<(), Failure> {
    let mut overrides = cli.overrides.clone();
    if let Some(t) = cli.trials {
        overrides.push(format!("trials={t}"));
    }
    let cfg = config::load(exp, cli.config.as_deref(), &overrides).map_err(Failure::Invalid)?;
    let seed = cli.seed.or(cfg.seed).or(cli.env_seed).unwrap_or(0);
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::Invalid(anyhow::anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    report.seed = seed;
    report.threads = rayon::current_num_threads();
    report.config = Some(cfg.clone());
    experiments::ensure_out_dir(&cli.out).map_err(Failure::Runtime)?;
    let ctx = Ctx {
        cfg: &cfg,
        seed,
        out_dir: &cli.out,
    };
    log::info!("running {} with seed {seed}", exp.name());
    let outcome = experiments::run(exp, &ctx).map_err(|e| {
        if e.downcast_ref::<Invalid>().is_some() {
            Failure::Invalid(e)
        } else {
            Failure::Runtime(e)
        }
    })?;
    report.checks = outcome.checks;
    report.outputs = outcome.outputs;
    report.summary = outcome.summary;
    Ok(())
}

fn write_report(cli: &Cli, report: &RunReport) -> Result<()> {
    let name = report
        .config
        .as_ref()
        .map(|c| c.outputs.report_json.clone())
        .unwrap_or_else(|| "report.json".into());
    experiments::ensure_out_dir(&cli.out)?;
    let path = cli.out.join(name);
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
