//! Training loop: Adam with decoupled weight decay, a cosine schedule with
//! warm restarts, and deterministic per-step clip sampling. The scaler
//! coefficients train in the same optimizer group as the network weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ScalerParams;
use crate::io::DepthSequence;
use crate::loss::{total_loss, LossWeights};
use crate::refiner::{read_blocks, save_model, write_blocks, RefinerGraph, RefinerModel};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor};

pub const OPT_MAGIC: &[u8; 6] = b"VDPPO1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub t0: usize,
    pub t_mult: usize,
    pub eta_min: f64,
    pub batch: usize,
    pub crop: usize,
    pub clip_len: usize,
    pub steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            t0: 200,
            t_mult: 2,
            eta_min: 1e-6,
            batch: 4,
            crop: 64,
            clip_len: 16,
            steps: 500,
            seed: 0,
            checkpoint_every: 100,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Production-scale hyperparameters for long runs on real corpora.
    pub fn full_scale_preset() -> Self {
        Self {
            base_lr: 1e-6,
            t0: 10_000,
            eta_min: 1e-9,
            batch: 16,
            crop: 224,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas ({b1}, {b2}) must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight-decay nonnegative".into());
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.base_lr) {
            return bad(format!(
                "eta-min {} must satisfy 0 < eta-min <= base-lr {}",
                self.eta_min, self.base_lr
            ));
        }
        if self.t0 == 0 || self.t_mult == 0 {
            return bad("t0 and t-mult must be at least 1".into());
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.crop < 3 {
            return bad("crop must be at least 3 pixels".into());
        }
        if self.clip_len < 2 {
            return bad("clip-len must be at least 2 frames".into());
        }
        self.loss.validate()
    }
}

/// Cosine annealing with warm restarts: cycle lengths t0, t0*t_mult,
/// t0*t_mult^2, ...; within a cycle of length T at offset c the rate is
/// eta_min + (base_lr - eta_min) * (1 + cos(pi * c / T)) / 2.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let mut cycle_len = cfg.t0;
    let mut offset = step;
    while offset >= cycle_len {
        offset -= cycle_len;
        cycle_len *= cfg.t_mult.max(1);
    }
    let cosine = (std::f64::consts::PI * offset as f64 / cycle_len as f64).cos();
    cfg.eta_min + (cfg.base_lr - cfg.eta_min) * (1.0 + cosine) / 2.0
}

/// Per-parameter Adam moments plus the completed-step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub slots: Vec<(String, Tensor, Tensor)>,
}

impl OptimizerState {
    /// Fresh zero moments for every model parameter plus the two scaler
    /// coefficients, in training order.
    pub fn for_model(model: &RefinerModel) -> Self {
        let mut slots: Vec<(String, Tensor, Tensor)> = model
            .params()
            .iter()
            .map(|(n, t)| {
                let z = Tensor::zeros(t.shape()).expect("parameter shapes are valid");
                (n.clone(), z.clone(), z)
            })
            .collect();
        for n in ["scaler.a", "scaler.b"] {
            let z = Tensor::zeros(&[1]).expect("scalar shape");
            slots.push((n.to_string(), z.clone(), z));
        }
        Self { step: 0, slots }
    }
}

/// One decoupled-weight-decay Adam update. `grads[i]` pairs with
/// `params[i]` and `state.slots[i]`.
pub fn adamw_step(
    params: &mut [(String, Tensor)],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.slots.len() {
        return Err(Error::InvalidArg(format!(
            "adamw_step: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.slots.len()
        )));
    }
    let (b1, b2) = cfg.betas;
    let t = state.step + 1;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for (((name, theta), grad), (slot_name, m, v)) in
        params.iter_mut().zip(grads).zip(&mut state.slots)
    {
        if name != slot_name || theta.shape() != grad.shape() || theta.shape() != m.shape() {
            return Err(Error::InvalidArg(format!(
                "adamw_step: parameter `{name}` does not line up with state slot `{slot_name}`"
            )));
        }
        if grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGrad { name: name.clone() });
        }
        let td = theta.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        let gd = grad.data();
        for i in 0..td.len() {
            let g = gd[i];
            md[i] = b1 * md[i] + (1.0 - b1) * g;
            vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            td[i] = td[i] * (1.0 - lr * cfg.weight_decay) - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    state.step = t;
    Ok(())
}

/// Aligned (degraded, ground-truth) sequence pairs.
pub struct Corpus {
    pairs: Vec<(DepthSequence, DepthSequence)>,
}

impl Corpus {
    pub fn new(pairs: Vec<(DepthSequence, DepthSequence)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArg("corpus: no sequence pairs".into()));
        }
        for (i, (d, g)) in pairs.iter().enumerate() {
            if d.len() != g.len() || d.resolution() != g.resolution() {
                return Err(Error::InvalidArg(format!(
                    "corpus: pair {i} mismatched ({}x{:?} vs {}x{:?})",
                    d.len(),
                    d.resolution(),
                    g.len(),
                    g.resolution()
                )));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(DepthSequence, DepthSequence)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Every sequence must fit the clip length and crop size; checked once
    /// up front rather than mid-training.
    pub fn validate_for(&self, cfg: &TrainConfig) -> Result<()> {
        for (i, (d, _)) in self.pairs.iter().enumerate() {
            let (h, w) = d.resolution();
            if d.len() < cfg.clip_len || h < cfg.crop || w < cfg.crop {
                return Err(Error::InvalidArg(format!(
                    "corpus: pair {i} ({} frames, {h}x{w}) too small for clip-len {} and crop {}",
                    d.len(),
                    cfg.clip_len,
                    cfg.crop
                )));
            }
        }
        Ok(())
    }
}

/// A co-located training clip: both sides share the clip window and crop.
pub struct Clip {
    pub degraded: Vec<Tensor>,
    pub gt: Vec<Tensor>,
}

fn crop_frame(f: &Tensor, y0: usize, x0: usize, side: usize) -> Tensor {
    let w = f.shape()[1];
    let data: Vec<f64> = (0..side)
        .flat_map(|i| {
            let row = (y0 + i) * w + x0;
            f.data()[row..row + side].iter().copied().collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(&[side, side], data).expect("crop bounds are pre-checked")
}

/// Deterministic batch for a step: choose a sequence, a clip start, and one
/// crop offset applied identically to the degraded clip and its ground
/// truth.
pub fn sample_batch(corpus: &Corpus, cfg: &TrainConfig, step: u64) -> Result<Vec<Clip>> {
    corpus.validate_for(cfg)?;
    let mut rng = SplitMix64::derive(cfg.seed, step);
    Ok((0..cfg.batch)
        .map(|_| {
            let (d, g) = &corpus.pairs()[rng.below(corpus.len())];
            let (h, w) = d.resolution();
            let t0 = rng.below(d.len() - cfg.clip_len + 1);
            let y0 = rng.below(h - cfg.crop + 1);
            let x0 = rng.below(w - cfg.crop + 1);
            let take = |seq: &DepthSequence| {
                seq.frames()[t0..t0 + cfg.clip_len]
                    .iter()
                    .map(|f| crop_frame(f, y0, x0, cfg.crop))
                    .collect()
            };
            Clip {
                degraded: take(d),
                gt: take(g),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub step: u64,
    pub lr: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub total: f64,
}

pub const TRAIN_CSV_HEADER: &str = "step,lr,loss_spatial,loss_temporal,loss_total";

pub fn train_csv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from(TRAIN_CSV_HEADER);
    for r in rows {
        out.push_str(&format!(
            "\n{},{},{},{},{}",
            r.step, r.lr, r.spatial, r.temporal, r.total
        ));
    }
    out.push('\n');
    out
}

fn wrap_nonfinite(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { step },
        other => other,
    }
}

/// Run `cfg.steps` optimization steps, mutating the model and scaler in
/// place. Step numbering is absolute (continuing `resume` if given), so a
/// resumed run replays exactly the schedule and batches of an uninterrupted
/// one. Checkpoints (model + optimizer sidecar) land in `checkpoint_dir`
/// every `checkpoint_every` completed steps.
pub fn train(
    model: &mut RefinerModel,
    scaler: &mut ScalerParams,
    corpus: &Corpus,
    cfg: &TrainConfig,
    resume: Option<OptimizerState>,
    checkpoint_dir: Option<&Path>,
) -> Result<(Vec<TrainLogRow>, OptimizerState)> {
    cfg.validate()?;
    corpus.validate_for(cfg)?;
    let n_model = model.params().len();
    let mut trainable: Vec<(String, Tensor)> = model
        .params()
        .to_vec()
        .into_iter()
        .chain([
            ("scaler.a".to_string(), Tensor::scalar(scaler.a)?),
            ("scaler.b".to_string(), Tensor::scalar(scaler.b)?),
        ])
        .collect();
    let mut state = resume.unwrap_or_else(|| OptimizerState::for_model(model));
    if state.slots.len() != trainable.len()
        || state
            .slots
            .iter()
            .zip(&trainable)
            .any(|((sn, m, _), (tn, t))| sn != tn || m.shape() != t.shape())
    {
        return Err(Error::InvalidArg(
            "optimizer state does not match the model's parameters".into(),
        ));
    }

    let mut log = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let step = state.step;
        let lr = lr_at(step as usize, cfg);
        let batch = sample_batch(corpus, cfg, step)?;
        let current = RefinerModel::from_parts(*model.config(), trainable[..n_model].to_vec())?;
        let cur_scaler = ScalerParams {
            a: trainable[n_model].1.data()[0],
            b: trainable[n_model + 1].1.data()[0],
        };

        let tape = Tape::new();
        let graph = RefinerGraph::new(&tape, &current, cur_scaler, true)?;
        let mut sums: Option<(crate::tensor::Var, crate::tensor::Var, crate::tensor::Var)> = None;
        for clip in &batch {
            let frames: Vec<_> = clip.degraded.iter().map(|f| tape.constant(f)).collect();
            let outs = graph.refine(&frames).map_err(|e| wrap_nonfinite(e, step))?;
            let parts = total_loss(&tape, &outs, &clip.gt, &cfg.loss)
                .map_err(|e| wrap_nonfinite(e, step))?;
            sums = Some(match sums {
                None => (parts.total, parts.spatial, parts.temporal),
                Some((t, s, te)) => (
                    tape.add(t, parts.total)?,
                    tape.add(s, parts.spatial)?,
                    tape.add(te, parts.temporal)?,
                ),
            });
        }
        let (tot_sum, sp_sum, te_sum) = sums.expect("batch is non-empty");
        let inv = tape.scalar_const(1.0 / cfg.batch as f64)?;
        let total = tape.mul(tot_sum, inv)?;
        let spatial_v = tape.value(tape.mul(sp_sum, inv)?)?.data()[0];
        let temporal_v = tape.value(tape.mul(te_sum, inv)?)?.data()[0];
        let total_v = tape.value(total)?.data()[0];
        if !total_v.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }

        tape.backward(total).map_err(|e| wrap_nonfinite(e, step))?;
        let grads: Vec<Tensor> = graph
            .param_vars()
            .iter()
            .map(|(_, v)| *v)
            .chain([graph.a, graph.b])
            .map(|v| {
                let shape = tape.shape_of(v)?;
                Ok(tape
                    .grad(v)?
                    .unwrap_or(Tensor::zeros(&shape)?))
            })
            .collect::<Result<_>>()?;
        adamw_step(&mut trainable, &grads, &mut state, lr, cfg)?;

        log.push(TrainLogRow {
            step,
            lr,
            spatial: spatial_v,
            temporal: temporal_v,
            total: total_v,
        });

        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every as u64 == 0 {
                let snapshot =
                    RefinerModel::from_parts(*model.config(), trainable[..n_model].to_vec())?;
                let snap_scaler = ScalerParams {
                    a: trainable[n_model].1.data()[0],
                    b: trainable[n_model + 1].1.data()[0],
                };
                let tag = format!("checkpoint_{:06}", state.step);
                save_model(&dir.join(format!("{tag}.vdpp")), &snapshot, snap_scaler)?;
                save_optimizer(&dir.join(format!("{tag}.vdppo")), &state)?;
            }
        }
    }

    *model = RefinerModel::from_parts(*model.config(), trainable[..n_model].to_vec())?;
    *scaler = ScalerParams {
        a: trainable[n_model].1.data()[0],
        b: trainable[n_model + 1].1.data()[0],
    };
    Ok((log, state))
}

/// Write optimizer moments in the same block layout as the model
/// container, under names `m.<param>` and `v.<param>`.
pub fn save_optimizer(path: &Path, state: &OptimizerState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(OPT_MAGIC)?;
    w.write_all(&state.step.to_le_bytes())?;
    w.write_all(&((state.slots.len() * 2) as u32).to_le_bytes())?;
    let named: Vec<(String, &Tensor)> = state
        .slots
        .iter()
        .flat_map(|(n, m, v)| [(format!("m.{n}"), m), (format!("v.{n}"), v)])
        .collect();
    write_blocks(&mut w, named.iter().map(|(n, t)| (n.as_str(), *t)))?;
    w.flush()?;
    Ok(())
}

pub fn load_optimizer(path: &Path) -> Result<OptimizerState> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::ModelFormat("truncated optimizer file header".into())
        } else {
            Error::Io(e)
        }
    })?;
    if &magic != OPT_MAGIC {
        if magic.starts_with(b"VDPPO") {
            return Err(Error::ModelFormat(format!(
                "unsupported optimizer container version `{}`",
                magic[5] as char
            )));
        }
        return Err(Error::ModelFormat("not a VDPP optimizer file".into()));
    }
    let mut step_bytes = [0u8; 8];
    r.read_exact(&mut step_bytes)
        .map_err(|_| Error::ModelFormat("truncated optimizer file header".into()))?;
    let mut count_bytes = [0u8; 4];
    r.read_exact(&mut count_bytes)
        .map_err(|_| Error::ModelFormat("truncated optimizer file header".into()))?;
    let count = u32::from_le_bytes(count_bytes) as usize;
    let blocks = read_blocks(&mut r, count, "optimizer")?;
    let mut slots: Vec<(String, Option<Tensor>, Option<Tensor>)> = Vec::new();
    for blk in blocks {
        let (kind, name) = blk
            .name
            .split_once('.')
            .filter(|(k, _)| *k == "m" || *k == "v")
            .ok_or_else(|| {
                Error::ModelFormat(format!("unknown parameter name `{}`", blk.name))
            })?;
        let slot = match slots.iter_mut().find(|(n, _, _)| n == name) {
            Some(s) => s,
            None => {
                slots.push((name.to_string(), None, None));
                slots.last_mut().expect("just pushed")
            }
        };
        let cell = if kind == "m" { &mut slot.1 } else { &mut slot.2 };
        if cell.replace(blk.tensor).is_some() {
            return Err(Error::ModelFormat(format!(
                "duplicate parameter `{}`",
                blk.name
            )));
        }
    }
    let slots = slots
        .into_iter()
        .map(|(n, m, v)| match (m, v) {
            (Some(m), Some(v)) if m.shape() == v.shape() => Ok((n, m, v)),
            (Some(_), Some(_)) => Err(Error::ModelFormat(format!(
                "moment shapes disagree for parameter `{n}`"
            ))),
            _ => Err(Error::ModelFormat(format!(
                "missing moment block for parameter `{n}`"
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OptimizerState {
        step: u64::from_le_bytes(step_bytes),
        slots,
    })
}
