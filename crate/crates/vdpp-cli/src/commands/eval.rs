//! `vdpp eval`: score predicted sequences against ground truth and emit a
//! CSV with one row per sequence plus an aggregate row.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use vdpp::io::{slit_scan, write_pgm, DepthSequence, ScanAxis};
use vdpp::metrics::{csv_row, evaluate, AlignMode, MetricsReport, CSV_HEADER};

use super::{
    disparity_to_depth, discover_sequences, echo_config, load_one_sequence, usage, CliError,
    CmdResult,
};

#[derive(Args)]
pub struct EvalArgs {
    /// Predicted sequence directory (frames, or one subdirectory per sequence)
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth directory mirroring --pred
    #[arg(long)]
    pub gt: PathBuf,
    /// Output directory for metrics.csv (and scan images); stdout only if omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score the raw prediction instead of fitting one scale/shift per sequence first
    #[arg(long)]
    pub no_align: bool,
    /// Treat input values as disparities: depth = 1 / max(d, 1e-6)
    #[arg(long)]
    pub disparity: bool,
    /// Write slit-scan images, e.g. row=32 or column=16 (needs --out)
    #[arg(long)]
    pub slitscan: Option<String>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct Resolved {
    pred: String,
    gt: String,
    no_align: bool,
    disparity: bool,
    slitscan: Option<String>,
}

fn parse_slitscan(spec: &str) -> std::result::Result<(ScanAxis, usize), CliError> {
    let err = || usage(format!("slitscan `{spec}`: expected row=N or column=N"));
    let (axis, index) = spec.split_once('=').ok_or_else(err)?;
    let index: usize = index.trim().parse().map_err(|_| err())?;
    match axis.trim() {
        "row" => Ok((ScanAxis::Row, index)),
        "column" => Ok((ScanAxis::Column, index)),
        _ => Err(err()),
    }
}

/// Pair prediction sequences with same-named ground-truth sequences. Flat
/// roots pair directly; nested roots pair by child directory name.
fn paired_dirs(
    pred_root: &Path,
    gt_root: &Path,
) -> std::result::Result<Vec<(String, PathBuf, PathBuf)>, CliError> {
    let preds = discover_sequences(pred_root)?;
    if preds.len() == 1 && preds[0].1 == pred_root {
        let gts = discover_sequences(gt_root)?;
        if !(gts.len() == 1 && gts[0].1 == gt_root) {
            return Err(CliError::Runtime(format!(
                "{} is a single sequence but {} is not",
                pred_root.display(),
                gt_root.display()
            )));
        }
        return Ok(vec![(
            preds.into_iter().next().expect("non-empty").0,
            pred_root.to_path_buf(),
            gt_root.to_path_buf(),
        )]);
    }
    preds
        .into_iter()
        .map(|(name, pred_dir)| {
            let gt_dir = gt_root.join(&name);
            if !gt_dir.is_dir() {
                return Err(CliError::Runtime(format!(
                    "no ground-truth sequence {} to match {}",
                    gt_dir.display(),
                    pred_dir.display()
                )));
            }
            Ok((name, pred_dir, gt_dir))
        })
        .collect()
}

fn aggregate(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len() as f64;
    MetricsReport {
        abs_rel: reports.iter().map(|r| r.abs_rel).sum::<f64>() / n,
        delta1: reports.iter().map(|r| r.delta1).sum::<f64>() / n,
        tgse: reports.iter().map(|r| r.tgse).sum::<f64>() / n,
        frames: reports.iter().map(|r| r.frames).sum(),
        d2v_ms_per_frame: None,
        fps: None,
    }
}

pub fn run(args: EvalArgs) -> CmdResult {
    let scan = args.slitscan.as_deref().map(parse_slitscan).transpose()?;
    if scan.is_some() && args.out.is_none() {
        return Err(usage("--slitscan writes images and needs --out"));
    }
    let mode = if args.no_align {
        AlignMode::None
    } else {
        AlignMode::PerSequenceScaleShift
    };

    let pairs = paired_dirs(&args.pred, &args.gt)?;
    let mut csv = String::from(CSV_HEADER);
    let mut reports = Vec::with_capacity(pairs.len());
    for (name, pred_dir, gt_dir) in &pairs {
        let mut pred = load_one_sequence(pred_dir)?;
        let mut gt = load_one_sequence(gt_dir)?;
        if args.disparity {
            pred = disparity_to_depth(&pred)?;
            gt = disparity_to_depth(&gt)?;
        }
        let report = evaluate(pred.frames(), gt.frames(), mode)?;
        csv.push('\n');
        csv.push_str(&csv_row(name, &report));
        if let (Some((axis, index)), Some(out)) = (scan, &args.out) {
            fs::create_dir_all(out)?;
            let write_scan = |seq: &DepthSequence, side: &str| -> CmdResult {
                let image = slit_scan(seq, axis, index)?;
                write_pgm(out.join(format!("{name}_{side}_scan.pgm")), &image)?;
                Ok(())
            };
            write_scan(&gt, "gt")?;
            write_scan(&pred, "pred")?;
        }
        reports.push(report);
    }
    csv.push('\n');
    csv.push_str(&csv_row("aggregate", &aggregate(&reports)));
    csv.push('\n');

    print!("{csv}");
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("metrics.csv"), &csv)?;
        echo_config(
            out,
            &Resolved {
                pred: args.pred.display().to_string(),
                gt: args.gt.display().to_string(),
                no_align: args.no_align,
                disparity: args.disparity,
                slitscan: args.slitscan.clone(),
            },
        )?;
    }
    Ok(())
}
