//! `vdpp train`: fit the scaler and refiner on a corpus directory produced
//! by `vdpp synth` (or laid out the same way) and write a checkpoint plus a
//! loss log.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use vdpp::geometry::ScalerParams;
use vdpp::io::{load_sequence, FRAME_PATTERN};
use vdpp::refiner::{load_model, save_model, RefinerConfig, RefinerModel};
use vdpp::train::{
    load_optimizer, save_optimizer, train, train_csv, Corpus, TrainConfig,
};

use super::{
    echo_config, load_config_file, usage, usage_check, with_path, CliError, CmdResult,
};

#[derive(Args)]
pub struct TrainArgs {
    /// Corpus directory: gt/ + degraded/ pairs with a manifest.json
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for model.vdpp, model.vdppo, train_log.csv
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Resume from a model checkpoint (optimizer sidecar found by extension)
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Start from the full-scale hyperparameter preset instead of desk defaults
    #[arg(long)]
    pub full_scale_preset: bool,

    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub eta_min: Option<f64>,
    #[arg(long)]
    pub t0: Option<usize>,
    #[arg(long)]
    pub t_mult: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub clip_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Spatial loss weight
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Temporal loss weight
    #[arg(long)]
    pub beta: Option<f64>,
    /// Temporal strides, comma separated (e.g. 1,2)
    #[arg(long, value_delimiter = ',')]
    pub tgm_strides: Option<Vec<usize>>,

    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub enc_blocks: Option<usize>,
    #[arg(long)]
    pub dec_blocks: Option<usize>,
    /// Temporal window length k
    #[arg(long)]
    pub window: Option<usize>,
    /// Manifold downsampling ratio
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Weight-init seed
    #[arg(long)]
    pub model_seed: Option<u64>,
}

/// File-supplied overrides; keys mirror the flags so an echoed
/// run_config.json loads back unchanged. The required --corpus and --out
/// flags always shadow their file keys.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct TrainFile {
    #[allow(dead_code)]
    corpus: Option<String>,
    #[allow(dead_code)]
    out: Option<String>,
    resume: Option<PathBuf>,
    full_scale_preset: Option<bool>,
    steps: Option<usize>,
    base_lr: Option<f64>,
    eta_min: Option<f64>,
    t0: Option<usize>,
    t_mult: Option<usize>,
    weight_decay: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    batch: Option<usize>,
    crop: Option<usize>,
    clip_len: Option<usize>,
    seed: Option<u64>,
    checkpoint_every: Option<usize>,
    alpha: Option<f64>,
    beta: Option<f64>,
    tgm_strides: Option<Vec<usize>>,
    patch: Option<usize>,
    embed_dim: Option<usize>,
    heads: Option<usize>,
    enc_blocks: Option<usize>,
    dec_blocks: Option<usize>,
    window: Option<usize>,
    ratio: Option<f64>,
    model_seed: Option<u64>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct Resolved {
    corpus: String,
    out: String,
    resume: Option<String>,
    full_scale_preset: bool,
    steps: usize,
    base_lr: f64,
    eta_min: f64,
    t0: usize,
    t_mult: usize,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    batch: usize,
    crop: usize,
    clip_len: usize,
    seed: u64,
    checkpoint_every: usize,
    alpha: f64,
    beta: f64,
    tgm_strides: Vec<usize>,
    patch: usize,
    embed_dim: usize,
    heads: usize,
    enc_blocks: usize,
    dec_blocks: usize,
    window: usize,
    ratio: f64,
    model_seed: u64,
}

struct Hypers {
    steps: Option<usize>,
    base_lr: Option<f64>,
    eta_min: Option<f64>,
    t0: Option<usize>,
    t_mult: Option<usize>,
    weight_decay: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    batch: Option<usize>,
    crop: Option<usize>,
    clip_len: Option<usize>,
    seed: Option<u64>,
    checkpoint_every: Option<usize>,
    alpha: Option<f64>,
    beta: Option<f64>,
    tgm_strides: Option<Vec<usize>>,
    patch: Option<usize>,
    embed_dim: Option<usize>,
    heads: Option<usize>,
    enc_blocks: Option<usize>,
    dec_blocks: Option<usize>,
    window: Option<usize>,
    ratio: Option<f64>,
    model_seed: Option<u64>,
}

impl Hypers {
    fn touches_model(&self) -> bool {
        self.patch.is_some()
            || self.embed_dim.is_some()
            || self.heads.is_some()
            || self.enc_blocks.is_some()
            || self.dec_blocks.is_some()
            || self.window.is_some()
            || self.ratio.is_some()
            || self.model_seed.is_some()
    }

    fn apply(&self, tc: &mut TrainConfig, mc: &mut RefinerConfig) {
        macro_rules! set {
            ($dst:expr; $($field:ident),* $(,)?) => {
                $( if let Some(v) = self.$field.clone() { $dst.$field = v; } )*
            };
        }
        set!(tc; steps, base_lr, eta_min, t0, t_mult, weight_decay, eps, batch, crop, clip_len, seed, checkpoint_every);
        if let Some(b1) = self.beta1 {
            tc.betas.0 = b1;
        }
        if let Some(b2) = self.beta2 {
            tc.betas.1 = b2;
        }
        if let Some(a) = self.alpha {
            tc.loss.alpha = a;
        }
        if let Some(b) = self.beta {
            tc.loss.beta = b;
        }
        if let Some(s) = self.tgm_strides.clone() {
            tc.loss.tgm_strides = s;
        }
        set!(mc; patch, embed_dim, heads, enc_blocks, dec_blocks, window, ratio);
        if let Some(s) = self.model_seed {
            mc.seed = s;
        }
    }
}

fn load_corpus(dir: &Path) -> std::result::Result<Corpus, CliError> {
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::Runtime(format!(
            "corpus manifest not found at {}",
            dir.join("manifest.json").display()
        )));
    }
    let pair_dirs: Vec<PathBuf> = if dir.join("gt").is_dir() && dir.join("degraded").is_dir() {
        vec![dir.to_path_buf()]
    } else {
        let mut subs: Vec<PathBuf> = fs::read_dir(dir)?
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.join("gt").is_dir() && p.join("degraded").is_dir())
            .collect();
        subs.sort();
        subs
    };
    if pair_dirs.is_empty() {
        return Err(CliError::Runtime(format!(
            "no gt/ + degraded/ pairs under {}",
            dir.display()
        )));
    }
    let pairs = pair_dirs
        .iter()
        .map(|p| {
            Ok((
                load_sequence(p.join("degraded"), FRAME_PATTERN)?,
                load_sequence(p.join("gt"), FRAME_PATTERN)?,
            ))
        })
        .collect::<vdpp::Result<Vec<_>>>()?;
    Ok(Corpus::new(pairs)?)
}

pub fn run(args: TrainArgs) -> CmdResult {
    let file: TrainFile = load_config_file(args.config.as_deref())?;
    let flags = Hypers {
        steps: args.steps,
        base_lr: args.base_lr,
        eta_min: args.eta_min,
        t0: args.t0,
        t_mult: args.t_mult,
        weight_decay: args.weight_decay,
        beta1: args.beta1,
        beta2: args.beta2,
        eps: args.eps,
        batch: args.batch,
        crop: args.crop,
        clip_len: args.clip_len,
        seed: args.seed,
        checkpoint_every: args.checkpoint_every,
        alpha: args.alpha,
        beta: args.beta,
        tgm_strides: args.tgm_strides.clone(),
        patch: args.patch,
        embed_dim: args.embed_dim,
        heads: args.heads,
        enc_blocks: args.enc_blocks,
        dec_blocks: args.dec_blocks,
        window: args.window,
        ratio: args.ratio,
        model_seed: args.model_seed,
    };
    let from_file = Hypers {
        steps: file.steps,
        base_lr: file.base_lr,
        eta_min: file.eta_min,
        t0: file.t0,
        t_mult: file.t_mult,
        weight_decay: file.weight_decay,
        beta1: file.beta1,
        beta2: file.beta2,
        eps: file.eps,
        batch: file.batch,
        crop: file.crop,
        clip_len: file.clip_len,
        seed: file.seed,
        checkpoint_every: file.checkpoint_every,
        alpha: file.alpha,
        beta: file.beta,
        tgm_strides: file.tgm_strides.clone(),
        patch: file.patch,
        embed_dim: file.embed_dim,
        heads: file.heads,
        enc_blocks: file.enc_blocks,
        dec_blocks: file.dec_blocks,
        window: file.window,
        ratio: file.ratio,
        model_seed: file.model_seed,
    };

    let resume = args.resume.clone().or(file.resume.clone());
    if resume.is_some() && (flags.touches_model() || from_file.touches_model()) {
        return Err(usage(
            "model shape comes from the resumed checkpoint; drop the model flags",
        ));
    }

    let full_scale_preset = args.full_scale_preset || file.full_scale_preset.unwrap_or(false);
    let mut tc = if full_scale_preset {
        TrainConfig::full_scale_preset()
    } else {
        TrainConfig::default()
    };
    let mut mc = RefinerConfig::default();
    from_file.apply(&mut tc, &mut mc);
    flags.apply(&mut tc, &mut mc);

    // Resuming replaces the model; do it before the echo so the sidecar
    // records the checkpoint's shape.
    let (mut model, mut scaler, opt_state) = match &resume {
        Some(path) => {
            let (model, scaler) = with_path(load_model(path), path)?;
            let opt_path = path.with_extension("vdppo");
            let state = with_path(load_optimizer(&opt_path), &opt_path)?;
            mc = *model.config();
            (model, scaler, Some(state))
        }
        None => {
            usage_check(mc.validate())?;
            (RefinerModel::init(mc)?, ScalerParams::default(), None)
        }
    };
    usage_check(tc.validate())?;

    let corpus = load_corpus(&args.corpus)?;
    corpus.validate_for(&tc)?;

    let resolved = Resolved {
        corpus: args.corpus.display().to_string(),
        out: args.out.display().to_string(),
        resume: resume.as_ref().map(|p| p.display().to_string()),
        full_scale_preset,
        steps: tc.steps,
        base_lr: tc.base_lr,
        eta_min: tc.eta_min,
        t0: tc.t0,
        t_mult: tc.t_mult,
        weight_decay: tc.weight_decay,
        beta1: tc.betas.0,
        beta2: tc.betas.1,
        eps: tc.eps,
        batch: tc.batch,
        crop: tc.crop,
        clip_len: tc.clip_len,
        seed: tc.seed,
        checkpoint_every: tc.checkpoint_every,
        alpha: tc.loss.alpha,
        beta: tc.loss.beta,
        tgm_strides: tc.loss.tgm_strides.clone(),
        patch: mc.patch,
        embed_dim: mc.embed_dim,
        heads: mc.heads,
        enc_blocks: mc.enc_blocks,
        dec_blocks: mc.dec_blocks,
        window: mc.window,
        ratio: mc.ratio,
        model_seed: mc.seed,
    };
    echo_config(&args.out, &resolved)?;

    let start_step = opt_state.as_ref().map_or(0, |s| s.step);
    let (log, state) = train(&mut model, &mut scaler, &corpus, &tc, opt_state, Some(&args.out))?;

    save_model(&args.out.join("model.vdpp"), &model, scaler)?;
    save_optimizer(&args.out.join("model.vdppo"), &state)?;
    fs::write(args.out.join("train_log.csv"), train_csv(&log))?;

    match log.last() {
        Some(row) => println!(
            "step {} (started at {}): loss {:.6} (spatial {:.6}, temporal {:.6}), lr {:.3e}",
            row.step, start_step, row.total, row.spatial, row.temporal, row.lr
        ),
        None => println!("no steps run; checkpoint written unchanged"),
    }
    println!("model: {}", args.out.join("model.vdpp").display());
    Ok(())
}
