use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::pfm::{read_pfm, write_pfm};
use crate::tensor::Tensor;

/// Default filename pattern for sequence directories.
pub const FRAME_PATTERN: &str = "*.pfm";

/// An ordered depth video: at least two frames, uniform resolution, each at
/// least 3x3 (the gradient filters need a full neighborhood).
#[derive(Debug, Clone)]
pub struct DepthSequence {
    frames: Vec<Tensor>,
    frame_rate: Option<f64>,
}

impl DepthSequence {
    pub fn new(frames: Vec<Tensor>, frame_rate: Option<f64>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Sequence(format!(
                "need at least 2 frames, got {}",
                frames.len()
            )));
        }
        let first = frames[0].shape().to_vec();
        if first.len() != 2 || first[0] < 3 || first[1] < 3 {
            return Err(Error::Sequence(format!(
                "frames must be at least 3x3, got {first:?}"
            )));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != first {
                return Err(Error::Sequence(format!(
                    "frame {i} is {:?}, expected {first:?}",
                    f.shape()
                )));
            }
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false // at least two frames by construction
    }

    /// (height, width)
    pub fn resolution(&self) -> (usize, usize) {
        (self.frames[0].shape()[0], self.frames[0].shape()[1])
    }

    pub fn frame_rate(&self) -> Option<f64> {
        self.frame_rate
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.frames.len() == other.frames.len()
            && self
                .frames
                .iter()
                .zip(&other.frames)
                .all(|(a, b)| a.bit_eq(b))
    }
}

/// Match a name against a pattern with at most one `*` wildcard.
fn matches_pattern(name: &str, pattern: &str) -> bool {
    match pattern.split_once('*') {
        Some((pre, suf)) => {
            name.len() >= pre.len() + suf.len() && name.starts_with(pre) && name.ends_with(suf)
        }
        None => name == pattern,
    }
}

/// Load every PFM matching `pattern` in `dir`, ordered lexicographically by
/// filename. Needs at least two frames of one resolution.
pub fn load_sequence(dir: impl AsRef<Path>, pattern: &str) -> Result<DepthSequence> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::Sequence(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            let name = entry.file_name().to_str()?.to_string();
            (entry.path().is_file() && matches_pattern(&name, pattern)).then_some(name)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Sequence(format!(
            "no frames matched {pattern} in {}",
            dir.display()
        )));
    }
    if names.len() < 2 {
        return Err(Error::Sequence(format!(
            "need at least 2 frames, found only {} in {}",
            names.len(),
            dir.display()
        )));
    }
    let mut frames = Vec::with_capacity(names.len());
    let mut first_shape: Option<Vec<usize>> = None;
    for name in &names {
        let frame = read_pfm(dir.join(name))?;
        match &first_shape {
            None => first_shape = Some(frame.shape().to_vec()),
            Some(s) if frame.shape() != &s[..] => {
                return Err(Error::Sequence(format!(
                    "{name} is {:?}, expected {s:?}",
                    frame.shape()
                )));
            }
            _ => {}
        }
        frames.push(frame);
    }
    DepthSequence::new(frames, None)
}

/// Write frames as `frame_%05d.pfm` under `dir` (created if missing).
pub fn save_sequence(dir: impl AsRef<Path>, seq: &DepthSequence) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (t, frame) in seq.frames().iter().enumerate() {
        write_pfm(dir.join(format!("frame_{t:05}.pfm")), frame)?;
    }
    Ok(())
}
