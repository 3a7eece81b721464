//! Command-line driver for the vdpp pipeline.
//!
//! Exit codes are a stable scripting contract: 0 on success, 1 on runtime
//! or data errors, 2 on usage errors (bad flags, bad config files).

mod commands;

use clap::{Parser, Subcommand};

use commands::{bench, eval, stabilize, sweep, synth, train};

#[derive(Parser)]
#[command(
    name = "vdpp",
    version,
    about = "Video depth post-processing: synthesize, train, stabilize, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic depth sequences, optionally with temporal degradation
    Synth(synth::SynthArgs),
    /// Train the scaler and refiner on a corpus of (degraded, ground-truth) pairs
    Train(train::TrainArgs),
    /// Refine a depth sequence with a trained model
    Stabilize(stabilize::StabilizeArgs),
    /// Score predicted sequences against ground truth
    Eval(eval::EvalArgs),
    /// Scale-perturbation sensitivity study over a lambda grid
    Sweep(sweep::SweepArgs),
    /// Measure per-frame refinement latency
    Bench(bench::BenchArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land on stdout and exit 0; real
            // parse failures are usage errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.cmd {
        Command::Synth(a) => synth::run(a),
        Command::Train(a) => train::run(a),
        Command::Stabilize(a) => stabilize::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Sweep(a) => sweep::run(a),
        Command::Bench(a) => bench::run(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
