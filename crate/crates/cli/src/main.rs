use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use penalty_mc::harness::{
    emit_report, load_config, run_convergence, run_diagnose, run_simulate, run_validation,
    with_workers, write_atomic, ExperimentConfig, Format, Overrides, RunManifest, Workers,
    WORKERS_ENV,
};
use penalty_mc::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Penalized and reflected diffusion Monte Carlo for Neumann problems.
#[derive(Debug, Parser)]
#[command(name = "penalty-mc", version)]
struct Cli {
    /// Experiment config (TOML, or JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    paths: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_format)]
    format: Option<Format>,
    /// Worker threads or "auto"
    #[arg(long, global = true)]
    workers: Option<Workers>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Geometry suite, assumption checks and exact-solution comparisons
    Validate,
    /// Penalization convergence study over the n schedule
    Converge,
    /// Dump simulated paths as CSV
    Simulate,
    /// Coupling distances and the tightness criterion
    Diagnose,
}

fn parse_format(s: &str) -> Result<Format, String> {
    match s {
        "csv" => Ok(Format::Csv),
        "json" => Ok(Format::Json),
        other => Err(format!("unknown format '{other}', expected csv or json")),
    }
}

enum Failure {
    Config(Error),
    Validation,
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::ConfigParse { .. } | Error::ConfigField { .. } | Error::UnknownProblem(_) => {
                Failure::Config(e)
            }
            other => Failure::Runtime(other),
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => load_config(path).map_err(|e| match e {
            Error::Io { .. } => Failure::Config(e),
            other => Failure::from(other),
        })?,
        None => ExperimentConfig::minimal("neumann-heat-interval", 0),
    };
    let overrides = Overrides {
        seed: cli.seed,
        paths: cli.paths,
        steps: cli.steps,
        output: cli.out.clone(),
        format: cli.format,
        workers: cli.workers,
    };
    let env = std::env::var(WORKERS_ENV).ok();
    overrides
        .apply(&mut config, env.as_deref())
        .map_err(Failure::Config)?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let config = resolve_config(cli)?;
    let name = match cli.command {
        Command::Validate => "validate",
        Command::Converge => "converge",
        Command::Simulate => "simulate",
        Command::Diagnose => "diagnose",
    };
    let mut manifest = RunManifest::begin(name, &config);
    let out = config.output.clone();
    let workers = config.workers;
    with_workers(workers, || -> Result<(), Failure> {
        match cli.command {
            Command::Validate => {
                let outcome = run_validation(&config)?;
                manifest.finish();
                if !outcome.rows.is_empty() {
                    emit_report(&outcome.rows, &manifest, None, config.format, &out)?;
                }
                for check in outcome.failures() {
                    eprintln!("FAILED {}: {}", check.name, check.detail);
                }
                println!(
                    "{} of {} checks passed",
                    outcome.checks.iter().filter(|c| c.passed).count(),
                    outcome.checks.len()
                );
                if !outcome.passed() {
                    return Err(Failure::Validation);
                }
            }
            Command::Converge => {
                let outcome = run_convergence(&config)?;
                manifest.finish();
                let diagnostics =
                    serde_json::to_value(&outcome.diagnostics).expect("report serializes");
                for path in emit_report(
                    &outcome.rows,
                    &manifest,
                    Some(&diagnostics),
                    config.format,
                    &out,
                )? {
                    println!("{}", path.display());
                }
            }
            Command::Simulate => {
                for path in run_simulate(&config)? {
                    println!("{}", path.display());
                }
            }
            Command::Diagnose => {
                let outcome = run_diagnose(&config)?;
                manifest.finish();
                std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(Error::io(&out, e)))?;
                let body = serde_json::json!({ "diagnostics": outcome, "manifest": manifest });
                let text = serde_json::to_string_pretty(&body).expect("report serializes");
                let path = write_atomic(&out, "diagnostics.json", text.as_bytes())?;
                println!("{}", path.display());
            }
        }
        Ok(())
    })
    .map_err(Failure::Runtime)?
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation) => ExitCode::from(EXIT_VALIDATION),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
