use crate::error::{Error, Result};
use crate::io::sequence::DepthSequence;
use crate::tensor::Tensor;

/// 8-bit grayscale raster, rows top-to-bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub w: usize,
    pub h: usize,
    pub pixels: Vec<u8>,
}

/// Linear map of a depth frame onto [0, 255] (floor, clamped). The range
/// defaults per side to the frame min/max. A collapsed range renders a
/// constant frame as all-zero; with a non-constant frame it is an error.
pub fn render_gray(frame: &Tensor, lo: Option<f64>, hi: Option<f64>) -> Result<GrayImage> {
    if frame.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "render_gray",
            shape: frame.shape().to_vec(),
            msg: "expected rank 2".into(),
        });
    }
    let data = frame.data();
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = lo.unwrap_or(min);
    let hi = hi.unwrap_or(max);
    if hi < lo {
        return Err(Error::InvalidArg(format!(
            "render_gray: lo {lo} exceeds hi {hi}"
        )));
    }
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    if hi == lo {
        if min == max {
            return Ok(GrayImage {
                w,
                h,
                pixels: vec![0; w * h],
            });
        }
        return Err(Error::DegenerateRange);
    }
    let span = hi - lo;
    let pixels = data
        .iter()
        .map(|&v| (((v - lo) / span * 255.0).floor()).clamp(0.0, 255.0) as u8)
        .collect();
    Ok(GrayImage { w, h, pixels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanAxis {
    Row,
    Column,
}

/// Raw slit-scan values: one line per frame stacked over time. Row axis
/// yields a T x W tensor (time vertical); column axis yields H x T (time
/// horizontal).
pub fn slit_scan_values(seq: &DepthSequence, axis: ScanAxis, index: usize) -> Result<Tensor> {
    let frames = seq.frames();
    let (h, w) = seq.resolution();
    let t_len = frames.len();
    match axis {
        ScanAxis::Row => {
            if index >= h {
                return Err(Error::InvalidArg(format!(
                    "slit_scan: row {index} out of range for height {h}"
                )));
            }
            let mut values = Vec::with_capacity(t_len * w);
            for frame in frames {
                values.extend_from_slice(&frame.data()[index * w..(index + 1) * w]);
            }
            Tensor::new(&[t_len, w], values)
        }
        ScanAxis::Column => {
            if index >= w {
                return Err(Error::InvalidArg(format!(
                    "slit_scan: column {index} out of range for width {w}"
                )));
            }
            let mut values = vec![0.0; h * t_len];
            for (t, frame) in frames.iter().enumerate() {
                for i in 0..h {
                    values[i * t_len + t] = frame.at2(i, index);
                }
            }
            Tensor::new(&[h, t_len], values)
        }
    }
}

/// Slit-scan rendered to 8 bits with the scan's own min/max range.
pub fn slit_scan(seq: &DepthSequence, axis: ScanAxis, index: usize) -> Result<GrayImage> {
    render_gray(&slit_scan_values(seq, axis, index)?, None, None)
}
