//! Command-line entry point: each subcommand maps onto one pipeline stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vfmf::config::Config;
use vfmf::pipeline::{self, Paths};

#[derive(Parser)]
#[command(name = "vfmf", version, about = "Stochastic feature forecasting on a synthetic multi-future world")]
struct Cli {
    /// Experiment config file (`key = value` lines); defaults apply if omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Targeted overrides, e.g. --set world.num_scenes=8 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Output directory (default: $VFMF_OUT or ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and persist it per split.
    GenData,
    /// Train the channel-compressing VAE on training features.
    TrainVae,
    /// Fit the PCA baseline on subsampled training features.
    FitPca,
    /// Train the rectified-flow forecaster.
    TrainFlow,
    /// Train the deterministic regression baseline.
    TrainRegression,
    /// Train one probing decoder (probe.task selects seg/depth/rgb).
    TrainProbe,
    /// Sample one rollout and dump decoded frames as PPM images.
    Rollout,
    /// Evaluate a trained method across contexts and protocols (CSV output).
    Evaluate,
    /// DCT power spectrum of the configured source (CSV + SVG).
    Spectrum,
    /// Render all reports-*.csv files as one aligned text table.
    Report,
}

fn resolve_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut config = match &cli.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got '{s}'"))?;
        config.set(k.trim(), v.trim())?;
    }
    Ok(config)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("VFMF_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let config = resolve_config(cli)?;
    let paths = Paths::new(out_dir(cli));
    match cli.command {
        Command::GenData => {
            pipeline::run_gen_data(&config, &paths)?;
        }
        Command::TrainVae => {
            pipeline::run_train_vae(&config, &paths)?;
        }
        Command::FitPca => {
            pipeline::run_fit_pca(&config, &paths)?;
        }
        Command::TrainFlow => {
            pipeline::run_train_flow(&config, &paths)?;
        }
        Command::TrainRegression => {
            pipeline::run_train_regression(&config, &paths)?;
        }
        Command::TrainProbe => {
            pipeline::run_train_probe(&config, &paths)?;
        }
        Command::Rollout => {
            pipeline::run_rollout(&config, &paths)?;
        }
        Command::Evaluate => {
            let reports = pipeline::run_evaluate(&config, &paths)?;
            println!("{}", vfmf::evaluation::reports_to_csv(&reports).trim_end());
        }
        Command::Spectrum => {
            let profile = pipeline::run_spectrum(&config, &paths)?;
            println!("source {} centroid {:.4}", profile.source, profile.centroid);
        }
        Command::Report => {
            let table = pipeline::run_report(&config, &paths)?;
            println!("{}", table.trim_end());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
