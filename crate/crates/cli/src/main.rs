//! `ctcascade`: simulate low-dose CT data, train cascaded denoisers,
//! denoise slices, evaluate, and check gradients.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use config::{DenoiseArgs, EvaluateArgs, FileConfig, GradcheckArgs, Preset, SimulateArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "ctcascade", version, about = "Cascaded CNN denoising of simulated low-dose CT")]
struct Cli {
    /// TOML file with a section per command; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads. Results are reproducible for a fixed thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Default sizes and schedules.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset with normal- and low-dose reconstructions.
    Simulate(SimulateArgs),
    /// Train a cascade of denoisers on a dataset's training split.
    Train(TrainArgs),
    /// Denoise dataset slices or single .ten files with a trained chain.
    Denoise(DenoiseArgs),
    /// Score every cascade on the test split (PSNR, SSIM; raw and blended).
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every layer's backward pass.
    Gradcheck(GradcheckArgs),
}

fn run(cli: Cli) -> Result<bool> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let threads = cli.threads.or(file.threads).unwrap_or(1);
    if threads == 0 {
        bail!("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the thread pool")?;
    let preset = cli.preset.or(file.preset).unwrap_or_default();

    match cli.command {
        Command::Simulate(args) => {
            let args = args.or(file.simulate.unwrap_or_default()).resolve(preset);
            commands::simulate(&args, preset, threads)?;
        }
        Command::Train(args) => {
            let args = args.or(file.train.unwrap_or_default()).resolve(preset)?;
            commands::train(&args, preset, threads)?;
        }
        Command::Denoise(args) => {
            let args = args.or(file.denoise.unwrap_or_default()).resolve();
            commands::denoise(&args, threads)?;
        }
        Command::Evaluate(args) => {
            let args = args.or(file.evaluate.unwrap_or_default()).resolve();
            commands::evaluate(&args, threads)?;
        }
        Command::Gradcheck(args) => {
            let args = args.or(file.gradcheck.unwrap_or_default()).resolve()?;
            return commands::gradcheck(&args, threads);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
