//! Median-conditioned depth scaling and the geometric input representation.
//!
//! A frame is first multiplied by exp(tanh(-a*m + b)) where m is the frame
//! median and (a, b) are the two learnable scaler parameters; the factor is
//! confined to (1/e, e) by the tanh. The scaled frame is then bilinearly
//! downsampled and stacked with its Sobel gradients into a 3-channel tensor,
//! the representation the refinement network consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Sobel kernel along width, normalized by 1/8 so a unit-slope ramp reads 1.
pub const SOBEL_X: [f64; 9] = [
    -0.125, 0.0, 0.125, //
    -0.25, 0.0, 0.25, //
    -0.125, 0.0, 0.125,
];

/// Sobel kernel along height, normalized by 1/8.
pub const SOBEL_Y: [f64; 9] = [
    -0.125, -0.25, -0.125, //
    0.0, 0.0, 0.0, //
    0.125, 0.25, 0.125,
];

/// The two learnable parameters of the depth scaler.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScalerParams {
    pub a: f64,
    pub b: f64,
}

/// Median of a slice: middle order statistic, or the mean of the two middle
/// order statistics for even counts. O(n) via selection.
pub fn median_of(data: &[f64]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArg("median of empty data".into()));
    }
    let mut v = data.to_vec();
    let n = v.len();
    let cmp = |a: &f64, b: &f64| a.partial_cmp(b).expect("finite values are ordered");
    if n % 2 == 1 {
        let (_, mid, _) = v.select_nth_unstable_by(n / 2, cmp);
        Ok(*mid)
    } else {
        let (lower, hi, _) = v.select_nth_unstable_by(n / 2, cmp);
        let lo = lower.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(0.5 * (lo + *hi))
    }
}

/// Frame median; treated as a constant in all gradient computations.
pub fn median(frame: &Tensor) -> f64 {
    median_of(frame.data()).expect("tensors are non-empty by construction")
}

/// The multiplicative factor exp(tanh(-a*m + b)) on plain values.
pub fn scale_factor(a: f64, b: f64, m: f64) -> f64 {
    (-(a * m) + b).tanh().exp()
}

/// A scaled frame together with the factor that produced it.
pub struct ScaledFrame {
    pub frame: Var,
    pub factor: Var,
}

/// Differentiable scaling: multiplies the frame by exp(tanh(-a*m + b)).
/// The median m is computed from the frame's current value and detached, so
/// gradients flow only into `a` and `b` (and through the frame itself).
pub fn scale_frame(tape: &Tape, frame: Var, a: Var, b: Var) -> Result<ScaledFrame> {
    let m = median(&tape.value(frame)?);
    let m_const = tape.scalar_const(m)?;
    let lin = tape.sub(b, tape.mul(a, m_const)?)?;
    let factor = tape.exp(tape.tanh(lin)?)?;
    let scaled = tape.mul(frame, factor)?;
    Ok(ScaledFrame {
        frame: scaled,
        factor,
    })
}

/// Bilinear resample by a ratio in (0, 4]: output is ceil(r*H) x ceil(r*W),
/// sampled at src = (i + 0.5)/r - 0.5 with edge clamping.
pub fn bilinear_resample(tape: &Tape, frame: Var, ratio: f64) -> Result<Var> {
    if !(ratio > 0.0 && ratio <= 4.0) {
        return Err(Error::InvalidArg(format!(
            "bilinear_resample: ratio {ratio} outside (0, 4]"
        )));
    }
    let shape = tape.shape_of(frame)?;
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "bilinear_resample",
            shape,
            msg: "expected rank 2".into(),
        });
    }
    let oh = (ratio * shape[0] as f64).ceil() as usize;
    let ow = (ratio * shape[1] as f64).ceil() as usize;
    tape.resize_bilinear(frame, oh, ow, ratio, ratio)
}

/// Resize to explicit target dims; sample ratios follow from the dim ratio.
pub fn resize_to(tape: &Tape, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let shape = tape.shape_of(x)?;
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    tape.resize_bilinear(x, out_h, out_w, out_h as f64 / h as f64, out_w as f64 / w as f64)
}

/// Normalized Sobel gradients (gx along width, gy along height) with
/// replicate padding. Needs at least a 3x3 frame.
pub fn sobel(tape: &Tape, frame: Var) -> Result<(Var, Var)> {
    let shape = tape.shape_of(frame)?;
    if shape.len() != 2 || shape[0] < 3 || shape[1] < 3 {
        return Err(Error::InvalidShape {
            op: "sobel",
            shape,
            msg: "needs a rank-2 frame of at least 3x3".into(),
        });
    }
    Ok((
        tape.conv3x3(frame, &SOBEL_X)?,
        tape.conv3x3(frame, &SOBEL_Y)?,
    ))
}

/// 3-channel geometric input: (downsampled depth, Sobel x, Sobel y), shape
/// [3, ceil(r*H), ceil(r*W)]. Differentiable end to end.
pub fn build_manifold(tape: &Tape, scaled_frame: Var, ratio: f64) -> Result<Var> {
    let down = bilinear_resample(tape, scaled_frame, ratio)?;
    let (gx, gy) = sobel(tape, down)?;
    tape.stack0(&[down, gx, gy])
}
