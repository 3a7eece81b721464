//! `vdpp stabilize`: run the scaler + refiner over a sequence and write the
//! refined frames.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use vdpp::io::save_sequence;
use vdpp::refiner::{load_model, refine_sequence, RefinerConfig};

use super::{
    disparity_to_depth, echo_config, identity_model, load_one_sequence, usage, with_path,
    CmdResult,
};

#[derive(Args)]
pub struct StabilizeArgs {
    /// Directory of input .pfm frames
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for refined frames
    #[arg(long)]
    pub out: PathBuf,
    /// Trained model checkpoint
    #[arg(long, conflicts_with = "identity")]
    pub model: Option<PathBuf>,
    /// Use a fresh zero-residual model with a = b = 0 (output equals input)
    #[arg(long)]
    pub identity: bool,
    /// Treat input values as disparities: depth = 1 / max(d, 1e-6)
    #[arg(long)]
    pub disparity: bool,
    /// Temporal window length for --identity mode
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct Resolved {
    input: String,
    model: Option<String>,
    identity: bool,
    disparity: bool,
    window: usize,
}

pub fn run(args: StabilizeArgs) -> CmdResult {
    let (model, scaler) = match (&args.model, args.identity) {
        (Some(path), false) => with_path(load_model(path), path)?,
        (None, true) => {
            let cfg = RefinerConfig {
                window: args.window.unwrap_or(RefinerConfig::default().window),
                ..RefinerConfig::default()
            };
            identity_model(cfg)?
        }
        _ => return Err(usage("pass exactly one of --model or --identity")),
    };

    let mut seq = load_one_sequence(&args.input)?;
    if args.disparity {
        seq = disparity_to_depth(&seq)?;
    }
    let refined = refine_sequence(&seq, scaler, &model)?;
    save_sequence(&args.out, &refined)?;
    echo_config(
        &args.out,
        &Resolved {
            input: args.input.display().to_string(),
            model: args.model.as_ref().map(|p| p.display().to_string()),
            identity: args.identity,
            disparity: args.disparity,
            window: model.config().window,
        },
    )?;
    println!(
        "refined {} frame(s) at {}x{} into {}",
        refined.len(),
        refined.resolution().0,
        refined.resolution().1,
        args.out.display()
    );
    Ok(())
}
