//! `vdpp synth`: write ground-truth scenes, and degraded twins when a
//! perturbation is requested.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use vdpp::io::save_sequence;
use vdpp::synth::{gen_scene, perturb_noise, perturb_scale, Background, PerturbSpec, SceneSpec};

use super::{apply_optional, apply_overrides, echo_config, load_config_file, usage, usage_check, CmdResult};

/// Keeps the additive-noise stream independent of the scale stream even
/// when both come from the same operator-supplied seed.
const NOISE_SALT: u64 = 0x6e6f697365;

fn parse_background(s: &str) -> std::result::Result<Background, String> {
    match s {
        "constant" => Ok(Background::Constant),
        "ramp" => Ok(Background::Ramp),
        other => Err(format!("background `{other}`: expected constant or ramp")),
    }
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory (scene_NNN subdirectories when --count > 1)
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of scenes (seeds advance per scene)
    #[arg(long)]
    pub count: Option<usize>,
    /// Base scene seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frames per scene
    #[arg(long)]
    pub t: Option<usize>,
    /// Frame height in pixels
    #[arg(long)]
    pub h: Option<usize>,
    /// Frame width in pixels
    #[arg(long)]
    pub w: Option<usize>,
    /// Moving objects per scene
    #[arg(long)]
    pub objects: Option<usize>,
    /// Nearest depth in the scene
    #[arg(long)]
    pub near: Option<f64>,
    /// Farthest depth in the scene
    #[arg(long)]
    pub far: Option<f64>,
    /// Maximum object speed in pixels per frame
    #[arg(long)]
    pub velocity: Option<f64>,
    /// Background fill: constant or ramp
    #[arg(long, value_parser = parse_background)]
    pub background: Option<Background>,
    /// Scale-flicker amplitude; writes a degraded/ twin
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Additive Gaussian noise on the degraded twin
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Base seed for the degradation streams
    #[arg(long)]
    pub perturb_seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
struct SynthFile {
    /// Accepted so an echoed run_config.json loads back; the required
    /// --out flag always wins.
    #[allow(dead_code)]
    out: Option<String>,
    count: Option<usize>,
    seed: Option<u64>,
    t: Option<usize>,
    h: Option<usize>,
    w: Option<usize>,
    objects: Option<usize>,
    near: Option<f64>,
    far: Option<f64>,
    velocity: Option<f64>,
    background: Option<Background>,
    lambda: Option<f64>,
    noise_sigma: Option<f64>,
    perturb_seed: Option<u64>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct Resolved {
    out: String,
    count: usize,
    seed: u64,
    t: usize,
    h: usize,
    w: usize,
    objects: usize,
    near: f64,
    far: f64,
    velocity: f64,
    background: Background,
    lambda: Option<f64>,
    noise_sigma: Option<f64>,
    perturb_seed: u64,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct ManifestScene {
    dir: String,
    scene: SceneSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    perturb: Option<PerturbSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_seed: Option<u64>,
}

#[derive(Serialize)]
struct Manifest {
    scenes: Vec<ManifestScene>,
}

fn resolve(args: &SynthArgs) -> std::result::Result<Resolved, super::CliError> {
    let file: SynthFile = load_config_file(args.config.as_deref())?;
    let base = SceneSpec::default();
    let mut r = Resolved {
        out: args.out.display().to_string(),
        count: 1,
        seed: base.seed,
        t: base.t,
        h: base.h,
        w: base.w,
        objects: base.n_objects,
        near: base.depth_range.0,
        far: base.depth_range.1,
        velocity: base.velocity,
        background: base.background,
        lambda: None,
        noise_sigma: None,
        perturb_seed: 1,
    };
    apply_overrides!(r, file; count, seed, t, h, w, objects, near, far, velocity, background, perturb_seed);
    apply_optional!(r, file; lambda, noise_sigma);
    apply_overrides!(r, args; count, seed, t, h, w, objects, near, far, velocity, background, perturb_seed);
    apply_optional!(r, args; lambda, noise_sigma);
    Ok(r)
}

fn scene_spec(r: &Resolved, index: u64) -> SceneSpec {
    SceneSpec {
        seed: r.seed + index,
        h: r.h,
        w: r.w,
        t: r.t,
        n_objects: r.objects,
        depth_range: (r.near, r.far),
        velocity: r.velocity,
        background: r.background,
    }
}

pub fn run(args: SynthArgs) -> CmdResult {
    let r = resolve(&args)?;
    if r.count == 0 {
        return Err(usage("count must be at least 1"));
    }
    usage_check(scene_spec(&r, 0).validate())?;
    if let Some(l) = r.lambda {
        usage_check(PerturbSpec { lambda: l, seed: 0 }.validate())?;
    }
    if let Some(s) = r.noise_sigma {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(usage(format!("noise-sigma {s} must be a finite nonnegative value")));
        }
    }

    let degrade = r.lambda.is_some() || r.noise_sigma.is_some();
    let mut manifest = Manifest { scenes: Vec::new() };
    for i in 0..r.count {
        let spec = scene_spec(&r, i as u64);
        let gt = gen_scene(&spec)?;
        let scene_dir = if r.count == 1 {
            args.out.clone()
        } else {
            args.out.join(format!("scene_{i:03}"))
        };
        save_sequence(scene_dir.join("gt"), &gt)?;

        let mut entry = ManifestScene {
            dir: scene_dir
                .strip_prefix(&args.out)
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            scene: spec,
            perturb: None,
            noise_sigma: None,
            noise_seed: None,
        };
        if degrade {
            let mut degraded = gt;
            if let Some(l) = r.lambda {
                let p = PerturbSpec {
                    lambda: l,
                    seed: r.perturb_seed + i as u64,
                };
                degraded = perturb_scale(&degraded, &p)?;
                entry.perturb = Some(p);
            }
            if let Some(s) = r.noise_sigma {
                let noise_seed = (r.perturb_seed + i as u64) ^ NOISE_SALT;
                degraded = perturb_noise(&degraded, s, noise_seed)?;
                entry.noise_sigma = Some(s);
                entry.noise_seed = Some(noise_seed);
            }
            save_sequence(scene_dir.join("degraded"), &degraded)?;
        }
        manifest.scenes.push(entry);
    }

    let manifest_text = serde_json::to_string_pretty(&manifest).map_err(vdpp::Error::from)?;
    fs::write(args.out.join("manifest.json"), manifest_text + "\n")?;
    echo_config(&args.out, &r)?;
    println!(
        "wrote {} scene(s) of {} frame(s) at {}x{}{} to {}",
        r.count,
        r.t,
        r.h,
        r.w,
        if degrade { " (gt + degraded)" } else { "" },
        args.out.display()
    );
    Ok(())
}
