//! `precipdiff`: synthetic data, dataset building, training, inference,
//! evaluation and raster utilities.
//!
//! Exit codes: 0 success, 2 I/O or configuration, 3 training divergence,
//! 4 model/task mismatch, 5 evaluation misuse.

mod cmd;
mod error;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "precipdiff", version, about = "Residual diffusion for precipitation bias correction and downscaling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic radar-like truth and biased satellite grids.
    Synth(cmd::synth::SynthArgs),
    /// Filter, split and tile events into training pairs.
    BuildDataset(cmd::dataset::DatasetArgs),
    /// Train a correction or downscaling model.
    Train(cmd::train::TrainArgs),
    /// Correct, downscale, or both.
    Infer(cmd::infer::InferArgs),
    /// Score predictions against truth.
    Eval(cmd::eval::EvalArgs),
    /// Resample or export a single grid.
    GridTool(cmd::gridtool::GridToolArgs),
}

/// Honors `PRECIPDIFF_THREADS` as a cap on worker threads.
fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("PRECIPDIFF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("PRECIPDIFF_THREADS={v} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Synth(a) => cmd::synth::run(a),
        Command::BuildDataset(a) => cmd::dataset::run(a),
        Command::Train(a) => cmd::train::run(a),
        Command::Infer(a) => cmd::infer::run(a),
        Command::Eval(a) => cmd::eval::run(a),
        Command::GridTool(a) => cmd::gridtool::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        let code = if e.use_stderr() { 2 } else { 0 };
        let _ = e.print();
        std::process::exit(code);
    });
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
