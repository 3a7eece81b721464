//! Synthetic depth video generation and controlled degradations: moving
//! flat shapes over a planar background, frame-wise multiplicative scale
//! flicker, additive Gaussian noise, and the scale-perturbation sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::DepthSequence;
use crate::metrics::{abs_rel, tgse, DEFAULT_VALID_MIN};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    Constant,
    Ramp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SceneSpec {
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub t: usize,
    pub n_objects: usize,
    /// (near, far) depth bounds; the background sits at or spans them.
    pub depth_range: (f64, f64),
    /// Maximum per-axis speed in pixels per frame.
    pub velocity: f64,
    pub background: Background,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            h: 64,
            w: 64,
            t: 16,
            n_objects: 3,
            depth_range: (0.5, 2.0),
            velocity: 2.0,
            background: Background::Ramp,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.h < 3 || self.w < 3 {
            return bad(format!("scene resolution {}x{} below 3x3", self.h, self.w));
        }
        if self.t < 2 {
            return bad("a scene needs at least 2 frames".into());
        }
        let (near, far) = self.depth_range;
        if !(near.is_finite() && far.is_finite() && near > 0.0 && near < far) {
            return bad(format!("depth range ({near}, {far}) must satisfy 0 < near < far"));
        }
        if !(self.velocity.is_finite() && self.velocity >= 0.0) {
            return bad(format!("velocity {} must be nonnegative", self.velocity));
        }
        Ok(())
    }
}

enum Shape {
    Disk,
    Rect,
}

struct SceneObject {
    shape: Shape,
    depth: f64,
    half: f64,
    center: (f64, f64),
    velocity: (f64, f64),
}

/// Deterministic scene: a constant or left-to-right ramp background with
/// flat disks (even object indices) and axis-aligned squares (odd indices)
/// at fixed depths, drifting at constant velocity and clamped at borders.
/// Nearer objects paint over farther ones.
pub fn gen_scene(spec: &SceneSpec) -> Result<DepthSequence> {
    spec.validate()?;
    let (near, far) = spec.depth_range;
    let mut rng = SplitMix64::new(spec.seed);
    let min_dim = spec.h.min(spec.w) as f64;
    let mut objects: Vec<SceneObject> = (0..spec.n_objects)
        .map(|i| SceneObject {
            shape: if i % 2 == 0 { Shape::Disk } else { Shape::Rect },
            depth: rng.uniform(near, far),
            half: rng.uniform(min_dim / 8.0, min_dim / 3.0) / 2.0,
            center: (
                rng.uniform(0.0, (spec.w - 1) as f64),
                rng.uniform(0.0, (spec.h - 1) as f64),
            ),
            velocity: (
                rng.uniform(-spec.velocity, spec.velocity),
                rng.uniform(-spec.velocity, spec.velocity),
            ),
        })
        .collect();
    objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let mut background = vec![0.0; spec.h * spec.w];
    match spec.background {
        Background::Constant => background.fill(far),
        Background::Ramp => {
            for i in 0..spec.h {
                for j in 0..spec.w {
                    background[i * spec.w + j] =
                        near + (far - near) * j as f64 / (spec.w - 1) as f64;
                }
            }
        }
    }

    let frames = (0..spec.t)
        .map(|t| {
            let mut data = background.clone();
            for obj in &objects {
                let step = t as f64;
                let cx = (obj.center.0 + obj.velocity.0 * step).clamp(0.0, (spec.w - 1) as f64);
                let cy = (obj.center.1 + obj.velocity.1 * step).clamp(0.0, (spec.h - 1) as f64);
                for i in 0..spec.h {
                    for j in 0..spec.w {
                        let (dx, dy) = (j as f64 - cx, i as f64 - cy);
                        let inside = match obj.shape {
                            Shape::Disk => dx * dx + dy * dy <= obj.half * obj.half,
                            Shape::Rect => dx.abs() <= obj.half && dy.abs() <= obj.half,
                        };
                        if inside {
                            data[i * spec.w + j] = obj.depth;
                        }
                    }
                }
            }
            Tensor::new(&[spec.h, spec.w], data)
        })
        .collect::<Result<Vec<_>>>()?;
    DepthSequence::new(frames, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct PerturbSpec {
    pub lambda: f64,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && (0.0..1.0).contains(&lambda)) {
        return Err(Error::InvalidArg(format!(
            "lambda {lambda} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Frame-wise multiplicative flicker: frame t is scaled by an independent
/// uniform draw from [1 - lambda, 1 + lambda], a pure function of
/// (seed, t).
pub fn perturb_scale(seq: &DepthSequence, spec: &PerturbSpec) -> Result<DepthSequence> {
    check_lambda(spec.lambda)?;
    let frames = seq
        .frames()
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let s = SplitMix64::derive(spec.seed, t as u64)
                .uniform(1.0 - spec.lambda, 1.0 + spec.lambda);
            Tensor::new(f.shape(), f.data().iter().map(|&v| v * s).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    DepthSequence::new(frames, seq.frame_rate())
}

/// The per-frame scale draws a perturbation would apply, for analysis.
pub fn scale_draws(t_len: usize, spec: &PerturbSpec) -> Result<Vec<f64>> {
    check_lambda(spec.lambda)?;
    Ok((0..t_len)
        .map(|t| {
            SplitMix64::derive(spec.seed, t as u64)
                .uniform(1.0 - spec.lambda, 1.0 + spec.lambda)
        })
        .collect())
}

/// Additive i.i.d. Gaussian pixel noise, clamped so depth stays positive.
pub fn perturb_noise(seq: &DepthSequence, sigma: f64, seed: u64) -> Result<DepthSequence> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidArg(format!("sigma {sigma} must be nonnegative")));
    }
    if sigma == 0.0 {
        return Ok(seq.clone());
    }
    let frames = seq
        .frames()
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let mut rng = SplitMix64::derive(seed, t as u64);
            Tensor::new(
                f.shape(),
                f.data()
                    .iter()
                    .map(|&v| (v + sigma * rng.normal()).max(DEFAULT_VALID_MIN))
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    DepthSequence::new(frames, seq.frame_rate())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub tgse_mean: f64,
    pub tgse_std: f64,
    pub absrel_mean: f64,
    pub absrel_std: f64,
    pub seeds: usize,
}

/// The default lambda grid 0.00, 0.05, ..., 0.50.
pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.05).collect()
}

/// For each lambda, perturb the ground truth under `seeds_per_point`
/// independent seeds and average unaligned TGSE and AbsRel against the
/// original. Reported spreads are population standard deviations.
pub fn sweep(
    gt: &DepthSequence,
    grid: &[f64],
    seeds_per_point: usize,
    base_seed: u64,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidArg("sweep: empty lambda grid".into()));
    }
    if seeds_per_point == 0 {
        return Err(Error::InvalidArg("sweep: needs at least one seed per point".into()));
    }
    grid.iter().try_for_each(|&l| check_lambda(l))?;
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    grid.iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let mut tgses = Vec::with_capacity(seeds_per_point);
            let mut absrels = Vec::with_capacity(seeds_per_point);
            for s in 0..seeds_per_point {
                let seed = SplitMix64::derive(base_seed, ((i as u64) << 32) | s as u64).next_u64();
                let degraded = perturb_scale(gt, &PerturbSpec { lambda, seed })?;
                tgses.push(tgse(degraded.frames(), gt.frames())?);
                absrels.push(abs_rel(degraded.frames(), gt.frames(), DEFAULT_VALID_MIN)?);
            }
            let (tm, ts) = stats(&tgses);
            let (am, asd) = stats(&absrels);
            Ok(SweepRow {
                lambda,
                tgse_mean: tm,
                tgse_std: ts,
                absrel_mean: am,
                absrel_std: asd,
                seeds: seeds_per_point,
            })
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: &str = "lambda,tgse_mean,tgse_std,absrel_mean,absrel_std,seeds";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    for r in rows {
        out.push_str(&format!(
            "\n{},{},{},{},{},{}",
            r.lambda, r.tgse_mean, r.tgse_std, r.absrel_mean, r.absrel_std, r.seeds
        ));
    }
    out.push('\n');
    out
}
