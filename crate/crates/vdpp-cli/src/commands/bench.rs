//! `vdpp bench`: time the full refinement pass and report per-frame cost.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use vdpp::metrics::bench_d2v;
use vdpp::refiner::{load_model, RefinerConfig};

use super::{echo_config, identity_model, load_one_sequence, usage, with_path, CmdResult};

#[derive(Args)]
pub struct BenchArgs {
    /// Directory of input .pfm frames
    #[arg(long)]
    pub input: PathBuf,
    /// Trained model checkpoint
    #[arg(long, conflicts_with = "identity")]
    pub model: Option<PathBuf>,
    /// Benchmark a fresh zero-residual model instead of a checkpoint
    #[arg(long)]
    pub identity: bool,
    /// Untimed passes before measuring
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Timed passes; the median counts
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Output directory for bench.txt; stdout only if omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct Resolved {
    input: String,
    model: Option<String>,
    identity: bool,
    warmup: usize,
    reps: usize,
}

pub fn run(args: BenchArgs) -> CmdResult {
    let (model, scaler) = match (&args.model, args.identity) {
        (Some(path), false) => with_path(load_model(path), path)?,
        (None, true) => identity_model(RefinerConfig::default())?,
        _ => return Err(usage("pass exactly one of --model or --identity")),
    };
    if args.reps == 0 {
        return Err(usage("reps must be at least 1"));
    }

    let seq = load_one_sequence(&args.input)?;
    let (h, w) = seq.resolution();
    let (ms, fps) = bench_d2v(&model, scaler, &seq, args.warmup, args.reps)?;
    let report = format!(
        "frames: {}\nresolution: {h}x{w}\nwindow: {}\nwarmup: {}\nreps: {}\nd2v: {ms:.4} ms/frame\nfps: {fps:.2}\n",
        seq.len(),
        model.config().window,
        args.warmup,
        args.reps,
    );

    print!("{report}");
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("bench.txt"), &report)?;
        echo_config(
            out,
            &Resolved {
                input: args.input.display().to_string(),
                model: args.model.as_ref().map(|p| p.display().to_string()),
                identity: args.identity,
                warmup: args.warmup,
                reps: args.reps,
            },
        )?;
    }
    Ok(())
}
