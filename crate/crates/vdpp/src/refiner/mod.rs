//! Residual spatio-temporal refinement network.
//!
//! Each frame's geometric manifold is patchified and encoded by a small
//! pre-norm transformer; a temporal-attention decoder then looks across a
//! window of frames per spatial token and emits per-patch residuals through
//! a zero-initialized head. Residuals are upsampled to the input resolution
//! and added onto the scaled depth, so a fresh model is an exact identity.

mod container;

pub use container::{load_model, read_blocks, save_model, write_blocks, ParamBlock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_manifold, resize_to, scale_frame, ScalerParams};
use crate::io::DepthSequence;
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

/// Side of the stored canonical positional grid; it is bilinearly resized to
/// the actual token grid at encode time.
pub const POS_GRID: usize = 8;

const MANIFOLD_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RefinerConfig {
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub window: usize,
    pub ratio: f64,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            embed_dim: 64,
            heads: 4,
            enc_blocks: 2,
            dec_blocks: 1,
            window: 16,
            ratio: 0.5,
            seed: 0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.patch == 0 {
            return bad("patch must be positive");
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed-dim must be a positive multiple of heads");
        }
        if self.enc_blocks == 0 || self.dec_blocks == 0 {
            return bad("enc-blocks and dec-blocks must be positive");
        }
        if self.window < 2 {
            return bad("window must be at least 2");
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return bad("ratio must be in (0, 1]");
        }
        Ok(())
    }
}

/// Shapes of every named parameter, in storage order. Initialization, the
/// container format, and the optimizer all follow this list.
pub fn param_specs(cfg: &RefinerConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let p2 = cfg.patch * cfg.patch;
    let mut specs = vec![
        ("patch_embed.w".into(), vec![MANIFOLD_CHANNELS * p2, d]),
        ("patch_embed.b".into(), vec![d]),
        ("pos.spatial".into(), vec![d, POS_GRID, POS_GRID]),
        ("pos.temporal".into(), vec![cfg.window, d]),
    ];
    let mut block = |prefix: String| {
        for (name, shape) in [
            ("ln1.g", vec![d]),
            ("ln1.b", vec![d]),
            ("attn.wq", vec![d, d]),
            ("attn.bq", vec![d]),
            ("attn.wk", vec![d, d]),
            ("attn.bk", vec![d]),
            ("attn.wv", vec![d, d]),
            ("attn.bv", vec![d]),
            ("attn.wo", vec![d, d]),
            ("attn.bo", vec![d]),
            ("ln2.g", vec![d]),
            ("ln2.b", vec![d]),
            ("mlp.w1", vec![d, 4 * d]),
            ("mlp.b1", vec![4 * d]),
            ("mlp.w2", vec![4 * d, d]),
            ("mlp.b2", vec![d]),
        ] {
            specs.push((format!("{prefix}{name}"), shape));
        }
    };
    for i in 0..cfg.enc_blocks {
        block(format!("enc{i}."));
    }
    for i in 0..cfg.dec_blocks {
        block(format!("dec{i}."));
    }
    specs.push(("dec.norm.g".into(), vec![d]));
    specs.push(("dec.norm.b".into(), vec![d]));
    specs.push(("head.w".into(), vec![d, p2]));
    specs.push(("head.b".into(), vec![p2]));
    specs
}

#[derive(Debug, Clone)]
pub struct RefinerModel {
    config: RefinerConfig,
    params: Vec<(String, Tensor)>,
}

impl RefinerModel {
    /// Deterministic initialization: scaled-uniform projection weights drawn
    /// from a single sequential stream, ones for norm gains, zeros for
    /// biases, positional embeddings, and the residual head.
    pub fn init(config: RefinerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(config.seed);
        let params = param_specs(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_param(&name, &shape, &mut rng);
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_parts(config: RefinerConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if params.len() != specs.len() {
            return Err(Error::InvalidArg(format!(
                "model expects {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, got)) in specs.iter().zip(&params) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::InvalidArg(format!(
                    "parameter `{got_name}` does not match expected `{name}` {shape:?}"
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Replace one parameter; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::InvalidArg(format!("unknown parameter `{name}`")))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: slot.1.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.1 = value;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((an, at), (bn, bt))| an == bn && at.bit_eq(bt))
    }
}

fn init_param(name: &str, shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let n: usize = shape.iter().product();
    if name.starts_with("head.") || name.starts_with("pos.") {
        return Tensor::zeros(shape).expect("spec shapes are valid");
    }
    if name.ends_with(".g") {
        return Tensor::full(shape, 1.0).expect("spec shapes are valid");
    }
    if shape.len() == 2 {
        let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
        let data = (0..n).map(|_| rng.uniform(-limit, limit)).collect();
        return Tensor::new(shape, data).expect("spec shapes are valid");
    }
    Tensor::zeros(shape).expect("spec shapes are valid")
}

/// Encoded frame: one token row per patch plus the grid geometry needed to
/// fold residuals back into an image.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    pub tokens: Tensor,
    pub grid: (usize, usize),
    pub resolution: (usize, usize),
}

#[derive(Clone, Copy)]
struct Encoded {
    tokens: Var,
    grid: (usize, usize),
    resolution: (usize, usize),
}

/// One entry of the sliding-window schedule: the window covers
/// `start..start+len` and contributes output frames from `emit_from` on
/// (indices within the window).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    pub emit_from: usize,
}

/// Stride-k partition of a sequence. A trailing partial window is extended
/// backward to full length and contributes only the frames no earlier
/// window produced; sequences shorter than k get a single shrunken window.
pub fn window_plan(t_len: usize, k: usize) -> Vec<Window> {
    if t_len <= k {
        return vec![Window {
            start: 0,
            len: t_len,
            emit_from: 0,
        }];
    }
    let mut plan = Vec::new();
    let mut covered = 0;
    while covered + k <= t_len {
        plan.push(Window {
            start: covered,
            len: k,
            emit_from: 0,
        });
        covered += k;
    }
    if covered < t_len {
        let start = t_len - k;
        plan.push(Window {
            start,
            len: k,
            emit_from: covered - start,
        });
    }
    plan
}

/// The model's parameters bound to a tape as variables, plus the scaler
/// coefficients. All forward passes (inference and training) go through
/// this graph so there is exactly one implementation of the pipeline.
pub struct RefinerGraph<'t> {
    tape: &'t Tape,
    cfg: RefinerConfig,
    vars: Vec<(String, Var)>,
    pub a: Var,
    pub b: Var,
}

impl<'t> RefinerGraph<'t> {
    pub fn new(
        tape: &'t Tape,
        model: &RefinerModel,
        scaler: ScalerParams,
        trainable: bool,
    ) -> Result<Self> {
        let a = tape.leaf(&Tensor::scalar(scaler.a)?, trainable);
        let b = tape.leaf(&Tensor::scalar(scaler.b)?, trainable);
        Self::bind(tape, model, a, b, trainable)
    }

    /// Bind model parameters as fresh leaves around caller-supplied scaler
    /// variables.
    pub fn bind(
        tape: &'t Tape,
        model: &RefinerModel,
        a: Var,
        b: Var,
        trainable: bool,
    ) -> Result<Self> {
        let vars = model
            .params()
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t, trainable)))
            .collect();
        Ok(Self {
            tape,
            cfg: *model.config(),
            vars,
            a,
            b,
        })
    }

    /// Assemble a graph over caller-supplied parameter variables (ordered as
    /// [`param_specs`]), e.g. leaves created by a gradient checker.
    pub fn from_vars(
        tape: &'t Tape,
        cfg: RefinerConfig,
        vars: Vec<(String, Var)>,
        a: Var,
        b: Var,
    ) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        if vars.len() != specs.len() {
            return Err(Error::InvalidArg(format!(
                "graph expects {} parameter variables, got {}",
                specs.len(),
                vars.len()
            )));
        }
        Ok(Self {
            tape,
            cfg,
            vars,
            a,
            b,
        })
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.cfg
    }

    fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .expect("parameter names come from param_specs")
    }

    fn gelu(&self, x: Var) -> Result<Var> {
        let t = self.tape;
        let x3 = t.mul(t.mul(x, x)?, x)?;
        let inner = t.add(x, t.mul(x3, t.scalar_const(0.044715)?)?)?;
        let th = t.tanh(t.mul(inner, t.scalar_const(0.797_884_560_802_865_4)?)?)?;
        let gate = t.add(th, t.scalar_const(1.0)?)?;
        t.mul(t.mul(x, t.scalar_const(0.5)?)?, gate)
    }

    /// Multi-head attention over the middle axis of a [batch, len, d] input.
    fn attention(&self, x: Var, prefix: &str) -> Result<Var> {
        let t = self.tape;
        let shape = t.shape_of(x)?;
        let (batch, len, d) = (shape[0], shape[1], shape[2]);
        let heads = self.cfg.heads;
        let dh = d / heads;
        let flat = t.reshape(x, &[batch * len, d])?;
        let split = |w: &str, b: &str| -> Result<Var> {
            let proj = t.add_rowvec(
                t.matmul(flat, self.var(&format!("{prefix}{w}")))?,
                self.var(&format!("{prefix}{b}")),
            )?;
            let h4 = t.reshape(proj, &[batch, len, heads, dh])?;
            t.reshape(t.transpose(h4, &[0, 2, 1, 3])?, &[batch * heads, len, dh])
        };
        let q = split("attn.wq", "attn.bq")?;
        let k = split("attn.wk", "attn.bk")?;
        let v = split("attn.wv", "attn.bv")?;
        let scores = t.bmm(q, t.transpose(k, &[0, 2, 1])?)?;
        let scaled = t.mul(scores, t.scalar_const(1.0 / (dh as f64).sqrt())?)?;
        let weights = t.softmax_lastdim(scaled)?;
        let ctx = t.bmm(weights, v)?;
        let merged = t.reshape(
            t.transpose(t.reshape(ctx, &[batch, heads, len, dh])?, &[0, 2, 1, 3])?,
            &[batch * len, d],
        )?;
        let out = t.add_rowvec(
            t.matmul(merged, self.var(&format!("{prefix}attn.wo")))?,
            self.var(&format!("{prefix}attn.bo")),
        )?;
        t.reshape(out, &[batch, len, d])
    }

    /// Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
    fn block(&self, x: Var, prefix: &str) -> Result<Var> {
        let t = self.tape;
        let shape = t.shape_of(x)?;
        let (batch, len, d) = (shape[0], shape[1], shape[2]);
        let h1 = t.layer_norm(
            x,
            self.var(&format!("{prefix}ln1.g")),
            self.var(&format!("{prefix}ln1.b")),
        )?;
        let x = t.add(x, self.attention(h1, prefix)?)?;
        let h2 = t.layer_norm(
            x,
            self.var(&format!("{prefix}ln2.g")),
            self.var(&format!("{prefix}ln2.b")),
        )?;
        let flat = t.reshape(h2, &[batch * len, d])?;
        let m1 = t.add_rowvec(
            t.matmul(flat, self.var(&format!("{prefix}mlp.w1")))?,
            self.var(&format!("{prefix}mlp.b1")),
        )?;
        let m2 = t.add_rowvec(
            t.matmul(self.gelu(m1)?, self.var(&format!("{prefix}mlp.w2")))?,
            self.var(&format!("{prefix}mlp.b2")),
        )?;
        t.add(x, t.reshape(m2, &[batch, len, d])?)
    }

    /// Patchify a [3, h, w] manifold (edge-padded to a patch multiple) and
    /// project each patch to an embedding row, before any positional term.
    fn embed(&self, manifold: Var) -> Result<Encoded> {
        let t = self.tape;
        let shape = t.shape_of(manifold)?;
        if shape.len() != 3 || shape[0] != MANIFOLD_CHANNELS {
            return Err(Error::InvalidShape {
                op: "encode_frame",
                shape,
                msg: "expected a [3, h, w] manifold".into(),
            });
        }
        let (h, w) = (shape[1], shape[2]);
        let p = self.cfg.patch;
        let (hp, wp) = (h.div_ceil(p) * p, w.div_ceil(p) * p);
        let padded = if (hp, wp) == (h, w) {
            manifold
        } else {
            t.pad_edge(manifold, hp, wp)?
        };
        let (gh, gw) = (hp / p, wp / p);
        let n = gh * gw;
        let grouped = t.reshape(padded, &[MANIFOLD_CHANNELS, gh, p, gw, p])?;
        let patches = t.transpose(grouped, &[1, 3, 0, 2, 4])?;
        let rows = t.reshape(patches, &[n, MANIFOLD_CHANNELS * p * p])?;
        let tokens = t.add_rowvec(
            t.matmul(rows, self.var("patch_embed.w"))?,
            self.var("patch_embed.b"),
        )?;
        Ok(Encoded {
            tokens,
            grid: (gh, gw),
            resolution: (h, w),
        })
    }

    fn encode(&self, manifold: Var) -> Result<Encoded> {
        let t = self.tape;
        let e = self.embed(manifold)?;
        let (gh, gw) = e.grid;
        let n = gh * gw;
        let d = self.cfg.embed_dim;
        let pos = resize_to(t, self.var("pos.spatial"), gh, gw)?;
        let pos_rows = t.transpose(t.reshape(pos, &[d, n])?, &[1, 0])?;
        let mut x = t.reshape(t.add(e.tokens, pos_rows)?, &[1, n, d])?;
        for i in 0..self.cfg.enc_blocks {
            x = self.block(x, &format!("enc{i}."))?;
        }
        Ok(Encoded {
            tokens: t.reshape(x, &[n, d])?,
            ..e
        })
    }

    /// Temporal decoding of up to `window` frames' features into one
    /// residual map per frame at the manifold resolution.
    fn decode(&self, feats: &[Encoded]) -> Result<Vec<Var>> {
        let t = self.tape;
        let len = feats.len();
        if len < 2 || len > self.cfg.window {
            return Err(Error::WindowLength {
                expected: self.cfg.window,
                found: len,
            });
        }
        let (gh, gw) = feats[0].grid;
        let (h, w) = feats[0].resolution;
        if feats
            .iter()
            .any(|f| f.grid != (gh, gw) || f.resolution != (h, w))
        {
            return Err(Error::InvalidArg(
                "decode_window: frames have mismatched token grids".into(),
            ));
        }
        let n = gh * gw;
        let d = self.cfg.embed_dim;
        let p = self.cfg.patch;
        let stacked = t.stack0(&feats.iter().map(|f| f.tokens).collect::<Vec<_>>())?;
        let by_token = t.transpose(stacked, &[1, 0, 2])?;
        let pos = if len == self.cfg.window {
            self.var("pos.temporal")
        } else {
            let rows: Vec<Var> = (0..len)
                .map(|i| t.index0(self.var("pos.temporal"), i))
                .collect::<Result<_>>()?;
            t.stack0(&rows)?
        };
        let mut x = t.add(by_token, t.repeat_leading(pos, n)?)?;
        for i in 0..self.cfg.dec_blocks {
            x = self.block(x, &format!("dec{i}."))?;
        }
        let flat = t.reshape(x, &[n * len, d])?;
        let normed = t.layer_norm(flat, self.var("dec.norm.g"), self.var("dec.norm.b"))?;
        let res = t.add_rowvec(t.matmul(normed, self.var("head.w"))?, self.var("head.b"))?;
        let by_frame = t.transpose(t.reshape(res, &[n, len, p * p])?, &[1, 0, 2])?;
        (0..len)
            .map(|i| {
                let frame = t.index0(by_frame, i)?;
                let blocks = t.transpose(t.reshape(frame, &[gh, gw, p, p])?, &[0, 2, 1, 3])?;
                let full = t.reshape(blocks, &[gh * p, gw * p])?;
                if (gh * p, gw * p) == (h, w) {
                    Ok(full)
                } else {
                    t.crop(full, h, w)
                }
            })
            .collect()
    }

    /// Full pipeline over a sequence of [H, W] frame variables: scale each
    /// frame, build its manifold, encode, decode by sliding windows, then
    /// upsample residuals and add them onto the scaled frames.
    pub fn refine(&self, frames: &[Var]) -> Result<Vec<Var>> {
        let t = self.tape;
        if frames.len() < 2 {
            return Err(Error::InvalidArg(
                "refine: a sequence needs at least 2 frames".into(),
            ));
        }
        let first = t.shape_of(frames[0])?;
        if first.len() != 2 {
            return Err(Error::InvalidShape {
                op: "refine",
                shape: first,
                msg: "expected rank-2 frames".into(),
            });
        }
        let (full_h, full_w) = (first[0], first[1]);
        let mut scaled = Vec::with_capacity(frames.len());
        let mut feats = Vec::with_capacity(frames.len());
        for (i, &f) in frames.iter().enumerate() {
            let shape = t.shape_of(f)?;
            if shape != first {
                return Err(Error::InvalidArg(format!(
                    "refine: frame {i} is {shape:?}, expected {first:?}"
                )));
            }
            let sf = scale_frame(t, f, self.a, self.b)?;
            let manifold = build_manifold(t, sf.frame, self.cfg.ratio)?;
            feats.push(self.encode(manifold)?);
            scaled.push(sf.frame);
        }
        let mut out: Vec<Option<Var>> = vec![None; frames.len()];
        for win in window_plan(frames.len(), self.cfg.window) {
            let residuals = self.decode(&feats[win.start..win.start + win.len])?;
            for i in win.emit_from..win.len {
                let at = win.start + i;
                let up = resize_to(t, residuals[i], full_h, full_w)?;
                out[at] = Some(t.add(scaled[at], up)?);
            }
        }
        Ok(out
            .into_iter()
            .map(|o| o.expect("window plan covers every frame"))
            .collect())
    }
}

/// Patchify + linear projection only (no positional term, no attention).
/// Token row i is a function of patch i alone.
pub fn embed_patches(model: &RefinerModel, manifold: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let graph = RefinerGraph::new(&tape, model, ScalerParams::default(), false)?;
    let e = graph.embed(tape.constant(manifold))?;
    tape.value(e.tokens)
}

/// Run the spatial encoder on one [3, h, w] manifold.
pub fn encode_frame(model: &RefinerModel, manifold: &Tensor) -> Result<FrameFeatures> {
    let tape = Tape::new();
    let graph = RefinerGraph::new(&tape, model, ScalerParams::default(), false)?;
    let e = graph.encode(tape.constant(manifold))?;
    Ok(FrameFeatures {
        tokens: tape.value(e.tokens)?,
        grid: e.grid,
        resolution: e.resolution,
    })
}

/// Decode exactly one window of encoded frames into residual maps at the
/// manifold resolution.
pub fn decode_window(model: &RefinerModel, features: &[FrameFeatures]) -> Result<Vec<Tensor>> {
    if features.len() != model.config().window {
        return Err(Error::WindowLength {
            expected: model.config().window,
            found: features.len(),
        });
    }
    let tape = Tape::new();
    let graph = RefinerGraph::new(&tape, model, ScalerParams::default(), false)?;
    let encoded: Vec<Encoded> = features
        .iter()
        .map(|f| Encoded {
            tokens: tape.constant(&f.tokens),
            grid: f.grid,
            resolution: f.resolution,
        })
        .collect();
    graph
        .decode(&encoded)?
        .into_iter()
        .map(|v| tape.value(v))
        .collect()
}

/// Stabilize a depth sequence: scale, refine, and add residuals, returning
/// a sequence at the input resolution.
pub fn refine_sequence(
    seq: &DepthSequence,
    scaler: ScalerParams,
    model: &RefinerModel,
) -> Result<DepthSequence> {
    let tape = Tape::new();
    let graph = RefinerGraph::new(&tape, model, scaler, false)?;
    let frames: Vec<Var> = seq.frames().iter().map(|f| tape.constant(f)).collect();
    let refined = graph
        .refine(&frames)?
        .into_iter()
        .map(|v| tape.value(v))
        .collect::<Result<Vec<_>>>()?;
    DepthSequence::new(refined, seq.frame_rate())
}
