use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use artiqc::{cmd_score, cmd_simulate, cmd_train_encoder, cmd_train_flow, run_selftest, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "artiqc", version, about = "Unsupervised artifact QC for image volumes")]
struct Cli {
    /// JSON run configuration; every key can also be overridden with --key value.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; relative artifact paths resolve against it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom dataset with a corrupted subset.
    Simulate(Overrides),
    /// Train the contrastive slice encoder on the dataset.
    TrainEncoder(Overrides),
    /// Embed the dataset and fit the density flow.
    TrainFlow(Overrides),
    /// Calibrate the density cutoff and write QC reports.
    Score(Overrides),
    /// Run built-in numerical checks.
    Selftest,
}

#[derive(Debug, clap::Args)]
struct Overrides {
    /// Config overrides such as `--tau 0.03` or `--flow.steps=500`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    rest: Vec<String>,
}

fn load_config(cli: &Cli, rest: &[String]) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.with_overrides(rest)?.finalize()
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Simulate(o) => {
            let manifest = cmd_simulate(&load_config(cli, &o.rest)?)?;
            println!("wrote {} volumes", manifest.volumes.len());
        }
        Command::TrainEncoder(o) => {
            let losses = cmd_train_encoder(&load_config(cli, &o.rest)?)?;
            println!("encoder: {} steps, final loss {:.5}", losses.len(), losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainFlow(o) => {
            let losses = cmd_train_flow(&load_config(cli, &o.rest)?)?;
            println!("flow: {} steps, final nll {:.5}", losses.len(), losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::Score(o) => {
            let outcome = cmd_score(&load_config(cli, &o.rest)?)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
            println!(
                "scored {} volumes, cutoff {:.4}, sensitivity {}, specificity {}; reports in {}",
                outcome.records.len(),
                outcome.calibration.log_density_cutoff,
                fmt(outcome.metrics.sensitivity),
                fmt(outcome.metrics.specificity),
                outcome.report_dir.display()
            );
        }
        Command::Selftest => {
            let checks = run_selftest();
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
