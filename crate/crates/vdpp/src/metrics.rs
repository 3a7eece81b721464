//! Evaluation metrics: absolute relative error, threshold accuracy,
//! temporal gradient squared error, optional per-sequence alignment, and
//! wall-clock benchmarking of the refinement pass.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::geometry::{median_of, ScalerParams};
use crate::io::DepthSequence;
use crate::loss::align_scale_shift;
use crate::refiner::{refine_sequence, RefinerModel};
use crate::tensor::Tensor;

/// Ground-truth pixels at or below this value are excluded from spatial
/// metrics.
pub const DEFAULT_VALID_MIN: f64 = 1e-6;

/// Ratio bound for threshold accuracy.
pub const DELTA1_THRESHOLD: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    None,
    PerSequenceScaleShift,
}

fn check_sequences(op: &'static str, pred: &[Tensor], gt: &[Tensor]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidArg(format!(
            "{op}: {} predicted frames vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Optionally fit one scale and shift over the whole sequence jointly and
/// apply it to every predicted frame.
pub fn eval_align(pred: &[Tensor], gt: &[Tensor], mode: AlignMode) -> Result<Vec<Tensor>> {
    check_sequences("eval_align", pred, gt)?;
    match mode {
        AlignMode::None => Ok(pred.to_vec()),
        AlignMode::PerSequenceScaleShift => {
            let pall: Vec<f64> = pred.iter().flat_map(|t| t.data().iter().copied()).collect();
            let gall: Vec<f64> = gt.iter().flat_map(|t| t.data().iter().copied()).collect();
            let (s, t) = align_scale_shift(&pall, &gall)?;
            pred.iter()
                .map(|f| {
                    Tensor::new(f.shape(), f.data().iter().map(|&v| s * v + t).collect())
                })
                .collect()
        }
    }
}

/// Mean of |pred - gt| / gt over all valid pixels of all frames.
pub fn abs_rel(pred: &[Tensor], gt: &[Tensor], valid_min: f64) -> Result<f64> {
    check_sequences("abs_rel", pred, gt)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        for (&pv, &gv) in p.data().iter().zip(g.data()) {
            if gv > valid_min {
                sum += (pv - gv).abs() / gv;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(sum / count as f64)
}

/// Fraction of valid pixels whose depth ratio max(pred/gt, gt/pred) is
/// strictly below the threshold.
pub fn delta1(pred: &[Tensor], gt: &[Tensor], threshold: f64, valid_min: f64) -> Result<f64> {
    check_sequences("delta1", pred, gt)?;
    let mut hits = 0usize;
    let mut count = 0usize;
    for (t, (p, g)) in pred.iter().zip(gt).enumerate() {
        for (&pv, &gv) in p.data().iter().zip(g.data()) {
            if gv > valid_min {
                if pv <= 0.0 {
                    return Err(Error::InvalidArg(format!(
                        "delta1: nonpositive prediction at a valid pixel of frame {t}"
                    )));
                }
                if (pv / gv).max(gv / pv) < threshold {
                    hits += 1;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(hits as f64 / count as f64)
}

/// Mean squared error between predicted and ground-truth frame-to-frame
/// differences, over all (T-1) * H * W temporal-pair pixels.
pub fn tgse(pred: &[Tensor], gt: &[Tensor]) -> Result<f64> {
    check_sequences("tgse", pred, gt)?;
    if pred.len() < 2 {
        return Err(Error::InvalidArg(
            "tgse: needs at least 2 frames".into(),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 0..pred.len() - 1 {
        let (p0, p1) = (pred[t].data(), pred[t + 1].data());
        let (g0, g1) = (gt[t].data(), gt[t + 1].data());
        for i in 0..p0.len() {
            let e = (p1[i] - p0[i]) - (g1[i] - g0[i]);
            sum += e * e;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub delta1: f64,
    pub tgse: f64,
    pub frames: usize,
    pub d2v_ms_per_frame: Option<f64>,
    pub fps: Option<f64>,
}

impl MetricsReport {
    pub fn tgse_x100(&self) -> f64 {
        100.0 * self.tgse
    }
}

/// Align (per the mode) and compute all three metrics.
pub fn evaluate(pred: &[Tensor], gt: &[Tensor], mode: AlignMode) -> Result<MetricsReport> {
    let aligned = eval_align(pred, gt, mode)?;
    Ok(MetricsReport {
        abs_rel: abs_rel(&aligned, gt, DEFAULT_VALID_MIN)?,
        delta1: delta1(&aligned, gt, DELTA1_THRESHOLD, DEFAULT_VALID_MIN)?,
        tgse: tgse(&aligned, gt)?,
        frames: pred.len(),
        d2v_ms_per_frame: None,
        fps: None,
    })
}

/// Median wall-clock cost of the full refinement pass per frame, after
/// discarding warmup runs. Returns (ms per frame, frames per second).
pub fn bench_d2v(
    model: &RefinerModel,
    scaler: ScalerParams,
    seq: &DepthSequence,
    warmup: usize,
    reps: usize,
) -> Result<(f64, f64)> {
    if reps == 0 {
        return Err(Error::InvalidArg("bench: reps must be at least 1".into()));
    }
    for _ in 0..warmup {
        refine_sequence(seq, scaler, model)?;
    }
    let mut total_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        refine_sequence(seq, scaler, model)?;
        total_ms.push(start.elapsed().as_secs_f64() * 1000.0);
    }
    let ms_per_frame = median_of(&total_ms)? / seq.len() as f64;
    Ok((ms_per_frame, 1000.0 / ms_per_frame))
}

pub const CSV_HEADER: &str = "sequence_id,abs_rel,delta1,tgse,tgse_x100,frames,d2v_ms,fps";

/// One CSV row matching [`CSV_HEADER`]; timing columns are empty when the
/// report was not benchmarked.
pub fn csv_row(id: &str, r: &MetricsReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{}",
        id,
        r.abs_rel,
        r.delta1,
        r.tgse,
        r.tgse_x100(),
        r.frames,
        opt(r.d2v_ms_per_frame),
        opt(r.fps)
    )
}
