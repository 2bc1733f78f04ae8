//! `ap3d`: parameter/FLOP counts, gradient checks, synthetic data, training,
//! evaluation, ablation sweeps and similarity heatmaps.
//!
//! Exit codes: 0 success, 1 verification failure or runtime error, 2 usage or
//! configuration error. `AP3D_THREADS` caps the worker threads.

mod commands;
mod config;
mod data;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{usage, CliResult};

#[derive(Parser, Debug)]
#[command(name = "ap3d", version, about = "Appearance-preserving 3D convolution for video re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter count and multiply-accumulates of an architecture.
    Count(commands::CountArgs),
    /// Finite-difference gradient checks.
    Gradcheck(commands::GradcheckArgs),
    /// Render and export a synthetic tracklet dataset.
    Synth(commands::SynthArgs),
    /// Train on synthetic or exported data, then evaluate.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint.
    Eval(commands::EvalArgs),
    /// Train and evaluate every setting of an ablation axis.
    Sweep(commands::SweepArgs),
    /// Export registration heatmaps for several scale factors.
    Heatmap(commands::HeatmapArgs),
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("AP3D_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| usage(format!("AP3D_THREADS='{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| config::CliError::Runtime(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Count(a) => commands::count(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Heatmap(a) => commands::heatmap(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
