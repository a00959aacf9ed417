use std::path::PathBuf;
use std::process::ExitCode;

use adapfl_core::accountant::{PrivacyLedger, RdpOrderGrid, RoundCost, DEFAULT_DELTA};
use adapfl_core::experiment::{self, ExperimentConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

/// Federated learning simulator with adaptive per-client differential privacy.
#[derive(Debug, Parser)]
#[command(name = "adapfl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment.
    Run(RunArgs),
    /// Run one experiment per value of a single config key.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Config key to vary, either dotted (`noise.sigma`) or an unambiguous leaf (`sigma`).
        #[arg(long)]
        axis: String,
        /// Comma-separated values; an empty string runs nothing.
        #[arg(long)]
        values: String,
    },
    /// Epsilon after a number of identical rounds.
    Accountant {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        rounds: u64,
        #[arg(long, default_value_t = DEFAULT_DELTA)]
        delta: f64,
        #[arg(long, default_value_t = 2)]
        min_order: u32,
        #[arg(long, default_value_t = 64)]
        max_order: u32,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config file; every key may also be given as `--section.key value`.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted config overrides, e.g. `--noise.sigma0 4 --privacy.epsilon=8`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let overrides = parse_overrides(&self.overrides)?;
        let mut cfg = experiment::parse_config(self.config.as_deref(), &overrides)?;
        cfg.resolve_output(experiment::output_root_from_env().as_deref());
        Ok(cfg)
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            bail!("expected `--key value`, got `{arg}`");
        };
        match flag.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .with_context(|| format!("missing value for `--{flag}`"))?;
                out.push((flag.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn accountant(q: f64, sigma: f64, rounds: u64, delta: f64, lo: u32, hi: u32) -> Result<()> {
    let mut ledger = PrivacyLedger::new(RdpOrderGrid::range(lo, hi)?);
    ledger.record_rounds(RoundCost::new(q, sigma)?, rounds)?;
    let g = ledger.to_dp(delta)?;
    println!("epsilon {}", g.epsilon);
    println!("best_order {}", g.best_order);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.load()?;
            let summary = experiment::run_experiment(&cfg)?;
            let m = &summary.manifest;
            println!(
                "{} rounds, final test accuracy {}, output {}",
                m.rounds_completed,
                m.final_test_acc.map_or("n/a".to_string(), |a| format!("{a:.4}")),
                summary.output_dir.display()
            );
        }
        Command::Sweep { run, axis, values } => {
            let cfg = run.load()?;
            let values: Vec<String> = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(String::from)
                .collect();
            for s in experiment::sweep(&cfg, &axis, &values)? {
                println!(
                    "{}: {} rounds, final test accuracy {}",
                    s.output_dir.display(),
                    s.manifest.rounds_completed,
                    s.manifest
                        .final_test_acc
                        .map_or("n/a".to_string(), |a| format!("{a:.4}"))
                );
            }
        }
        Command::Accountant {
            q,
            sigma,
            rounds,
            delta,
            min_order,
            max_order,
        } => accountant(q, sigma, rounds, delta, min_order, max_order)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
