//! Training objectives: affine-invariant spatial error plus temporal
//! gradient matching, combined as alpha * spatial + beta * temporal.
//!
//! Alignment coefficients are recomputed from current values every call and
//! treated as constants by the gradient; the `*_frozen` variants accept
//! precomputed coefficients so finite-difference checks can differentiate
//! exactly the function the tape differentiates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tgm_strides: Vec<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 10.0,
            tgm_strides: vec![1],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidConfig(
                "loss weights must be nonnegative".into(),
            ));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::InvalidConfig(
                "loss weights must not both be zero".into(),
            ));
        }
        if self.tgm_strides.is_empty() || self.tgm_strides.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig(
                "temporal strides must be a nonempty set of positive offsets".into(),
            ));
        }
        Ok(())
    }
}

/// Closed-form least squares fit of s*pred + t to gt over all elements.
/// Degenerate predictions (population variance below 1e-12) fall back to
/// s=1 with a pure shift.
pub fn align_scale_shift(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidArg(format!(
            "align_scale_shift: {} vs {} elements",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gt.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        let dp = p - mp;
        cov += dp * (g - mg);
        var += dp * dp;
    }
    if var / n < 1e-12 {
        return Ok((1.0, mg - mp));
    }
    let s = cov / var;
    Ok((s, mg - s * mp))
}

fn check_pairs(tape: &Tape, op: &'static str, pred: &[Var], gt: &[Tensor]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidArg(format!(
            "{op}: {} predicted frames vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    for (&p, g) in pred.iter().zip(gt) {
        let ps = tape.shape_of(p)?;
        if ps != g.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: ps,
                rhs: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Per-frame alignment coefficients for the current predicted values.
pub fn spatial_coeffs(tape: &Tape, pred: &[Var], gt: &[Tensor]) -> Result<Vec<(f64, f64)>> {
    check_pairs(tape, "spatial_loss", pred, gt)?;
    pred.iter()
        .zip(gt)
        .map(|(&p, g)| align_scale_shift(tape.value(p)?.data(), g.data()))
        .collect()
}

/// Mean absolute error after applying the given per-frame (s, t), averaged
/// over frames. The coefficients enter as constants.
pub fn spatial_loss_frozen(
    tape: &Tape,
    pred: &[Var],
    gt: &[Tensor],
    coeffs: &[(f64, f64)],
) -> Result<Var> {
    check_pairs(tape, "spatial_loss", pred, gt)?;
    if coeffs.len() != pred.len() {
        return Err(Error::InvalidArg(format!(
            "spatial_loss: {} coefficient pairs for {} frames",
            coeffs.len(),
            pred.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for ((&p, g), &(s, t)) in pred.iter().zip(gt).zip(coeffs) {
        let aligned = tape.add(tape.mul(p, tape.scalar_const(s)?)?, tape.scalar_const(t)?)?;
        let err = tape.abs(tape.sub(aligned, tape.constant(g))?)?;
        let frame_loss = tape.mean_all(err)?;
        acc = Some(match acc {
            None => frame_loss,
            Some(a) => tape.add(a, frame_loss)?,
        });
    }
    let sum = acc.expect("at least one frame");
    tape.mul(sum, tape.scalar_const(1.0 / pred.len() as f64)?)
}

/// Affine-invariant spatial loss: per frame, fit s*pred + t to gt in closed
/// form (detached), then take the mean L1 error; average over frames.
pub fn spatial_loss(tape: &Tape, pred: &[Var], gt: &[Tensor]) -> Result<Var> {
    let coeffs = spatial_coeffs(tape, pred, gt)?;
    spatial_loss_frozen(tape, pred, gt, &coeffs)
}

/// Frame-to-frame differences at a stride: output t holds frame[t+stride]
/// minus frame[t].
pub fn temporal_gradient(frames: &[Tensor], stride: usize) -> Result<Vec<Tensor>> {
    if stride == 0 {
        return Err(Error::InvalidArg("temporal stride must be positive".into()));
    }
    if frames.len() <= stride {
        return Err(Error::InvalidArg(format!(
            "temporal stride {stride} needs more than {stride} frames, got {}",
            frames.len()
        )));
    }
    (0..frames.len() - stride)
        .map(|t| {
            let a = frames[t].data();
            let b = frames[t + stride].data();
            if frames[t].shape() != frames[t + stride].shape() {
                return Err(Error::ShapeMismatch {
                    op: "temporal_gradient",
                    lhs: frames[t].shape().to_vec(),
                    rhs: frames[t + stride].shape().to_vec(),
                });
            }
            Tensor::new(
                frames[t].shape(),
                a.iter().zip(b).map(|(x, y)| y - x).collect(),
            )
        })
        .collect()
}

/// Temporal gradient matching: for each stride, the mean over pixels and
/// frame pairs of |temporal difference of pred minus that of gt|, averaged
/// over the stride set.
pub fn tgm_loss(tape: &Tape, pred: &[Var], gt: &[Tensor], strides: &[usize]) -> Result<Var> {
    check_pairs(tape, "tgm_loss", pred, gt)?;
    if strides.is_empty() {
        return Err(Error::InvalidArg("tgm_loss: empty stride set".into()));
    }
    let t_len = pred.len();
    let pixel_count: usize = gt[0].len();
    let mut per_stride: Vec<Var> = Vec::with_capacity(strides.len());
    for &s in strides {
        if s == 0 || s >= t_len {
            return Err(Error::InvalidArg(format!(
                "tgm_loss: stride {s} invalid for {t_len} frames"
            )));
        }
        let gt_diffs = temporal_gradient(gt, s)?;
        let mut acc: Option<Var> = None;
        for t in 0..t_len - s {
            let dp = tape.sub(pred[t + s], pred[t])?;
            let err = tape.abs(tape.sub(dp, tape.constant(&gt_diffs[t]))?)?;
            let e = tape.sum_all(err)?;
            acc = Some(match acc {
                None => e,
                Some(a) => tape.add(a, e)?,
            });
        }
        let sum = acc.expect("at least one pair per stride");
        let norm = 1.0 / ((t_len - s) * pixel_count) as f64;
        per_stride.push(tape.mul(sum, tape.scalar_const(norm)?)?);
    }
    let mut total = per_stride[0];
    for &v in &per_stride[1..] {
        total = tape.add(total, v)?;
    }
    tape.mul(total, tape.scalar_const(1.0 / per_stride.len() as f64)?)
}

/// The three scalars of the combined objective.
pub struct LossParts {
    pub total: Var,
    pub spatial: Var,
    pub temporal: Var,
}

fn combine(tape: &Tape, spatial: Var, temporal: Var, w: &LossWeights) -> Result<LossParts> {
    let ws = tape.mul(spatial, tape.scalar_const(w.alpha)?)?;
    let wt = tape.mul(temporal, tape.scalar_const(w.beta)?)?;
    Ok(LossParts {
        total: tape.add(ws, wt)?,
        spatial,
        temporal,
    })
}

/// alpha * spatial + beta * temporal, differentiable through `pred`.
pub fn total_loss(tape: &Tape, pred: &[Var], gt: &[Tensor], w: &LossWeights) -> Result<LossParts> {
    w.validate()?;
    let spatial = spatial_loss(tape, pred, gt)?;
    let temporal = tgm_loss(tape, pred, gt, &w.tgm_strides)?;
    combine(tape, spatial, temporal, w)
}

/// As [`total_loss`] but with the spatial alignment coefficients supplied,
/// for gradient verification against a fixed function.
pub fn total_loss_frozen(
    tape: &Tape,
    pred: &[Var],
    gt: &[Tensor],
    w: &LossWeights,
    coeffs: &[(f64, f64)],
) -> Result<LossParts> {
    w.validate()?;
    let spatial = spatial_loss_frozen(tape, pred, gt, coeffs)?;
    let temporal = tgm_loss(tape, pred, gt, &w.tgm_strides)?;
    combine(tape, spatial, temporal, w)
}
