//! `vdpp sweep`: degrade a ground-truth sequence across a lambda grid and
//! tabulate unaligned TGSE and AbsRel per grid point.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use vdpp::io::{render_gray, write_pgm};
use vdpp::synth::{sweep, sweep_csv, SweepRow};
use vdpp::tensor::Tensor;

use super::{
    apply_overrides, echo_config, load_config_file, load_one_sequence, usage, CmdResult,
};

#[derive(Args)]
pub struct SweepArgs {
    /// Ground-truth sequence directory (or a synth output with a gt/ child)
    #[arg(long)]
    pub gt: PathBuf,
    /// Output directory for sweep.csv; stdout only if omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Largest lambda on the grid
    #[arg(long)]
    pub max_lambda: Option<f64>,
    /// Grid spacing
    #[arg(long)]
    pub step: Option<f64>,
    /// Perturbation seeds per grid point
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Base seed for the per-point streams
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write a PGM heat strip of TGSE over lambda (needs --out)
    #[arg(long)]
    pub heatstrip: bool,
}

/// Keys mirror the flags so an echoed run_config.json loads back; the
/// required --gt flag always shadows its file key.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct SweepFile {
    #[allow(dead_code)]
    gt: Option<String>,
    out: Option<PathBuf>,
    max_lambda: Option<f64>,
    step: Option<f64>,
    seeds: Option<usize>,
    seed: Option<u64>,
    heatstrip: Option<bool>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct Resolved {
    gt: String,
    out: Option<String>,
    max_lambda: f64,
    step: f64,
    seeds: usize,
    seed: u64,
    heatstrip: bool,
}

fn build_grid(max_lambda: f64, step: f64) -> std::result::Result<Vec<f64>, super::CliError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(usage(format!("grid step {step} must be positive")));
    }
    if !(max_lambda >= 0.0 && max_lambda < 1.0) {
        return Err(usage(format!("max-lambda {max_lambda} outside [0, 1)")));
    }
    let n = (max_lambda / step).round() as usize;
    Ok((0..=n).map(|i| i as f64 * step).collect())
}

/// Columns of constant gray, one block per grid point, dark to bright as
/// TGSE grows.
fn heat_strip(rows: &[SweepRow]) -> vdpp::Result<Tensor> {
    const BLOCK: usize = 8;
    const HEIGHT: usize = 16;
    let mut values = Vec::with_capacity(HEIGHT * rows.len() * BLOCK);
    for _ in 0..HEIGHT {
        for r in rows {
            values.extend(std::iter::repeat(r.tgse_mean).take(BLOCK));
        }
    }
    Tensor::new(&[HEIGHT, rows.len() * BLOCK], values)
}

pub fn run(args: SweepArgs) -> CmdResult {
    let file: SweepFile = load_config_file(args.config.as_deref())?;
    let out = args.out.clone().or(file.out.clone());
    let mut r = Resolved {
        gt: args.gt.display().to_string(),
        out: out.as_ref().map(|p| p.display().to_string()),
        max_lambda: 0.5,
        step: 0.05,
        seeds: 20,
        seed: 0,
        heatstrip: args.heatstrip || file.heatstrip.unwrap_or(false),
    };
    apply_overrides!(r, file; max_lambda, step, seeds, seed);
    apply_overrides!(r, args; max_lambda, step, seeds, seed);
    let grid = build_grid(r.max_lambda, r.step)?;
    if r.seeds == 0 {
        return Err(usage("seeds must be at least 1"));
    }
    if r.heatstrip && out.is_none() {
        return Err(usage("--heatstrip writes an image and needs --out"));
    }

    let gt_dir = if args.gt.join("gt").is_dir() {
        args.gt.join("gt")
    } else {
        args.gt.clone()
    };
    let gt = load_one_sequence(&gt_dir)?;
    let rows = sweep(&gt, &grid, r.seeds, r.seed)?;
    let csv = sweep_csv(&rows);

    print!("{csv}");
    if let Some(out) = &out {
        fs::create_dir_all(out)?;
        fs::write(out.join("sweep.csv"), &csv)?;
        if r.heatstrip {
            let strip = heat_strip(&rows)?;
            let hi = rows.iter().map(|x| x.tgse_mean).fold(0.0, f64::max);
            let image = render_gray(&strip, Some(0.0), Some(hi.max(1e-12)))?;
            write_pgm(out.join("heatstrip.pgm"), &image)?;
        }
        echo_config(out, &r)?;
    }
    Ok(())
}
