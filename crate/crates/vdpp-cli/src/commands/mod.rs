//! Shared plumbing for the subcommands: error-to-exit-code mapping, config
//! file loading, the run-config echo, and sequence-directory discovery.

pub mod bench;
pub mod eval;
pub mod stabilize;
pub mod sweep;
pub mod synth;
pub mod train;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use vdpp::geometry::ScalerParams;
use vdpp::io::{load_sequence, DepthSequence, FRAME_PATTERN};
use vdpp::refiner::{RefinerConfig, RefinerModel};
use vdpp::tensor::Tensor;

/// Usage errors exit 2, everything that goes wrong while running exits 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<vdpp::Error> for CliError {
    fn from(e: vdpp::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CmdResult = std::result::Result<(), CliError>;

/// Attach the file path to errors from loaders that do not carry it.
pub fn with_path<T>(r: vdpp::Result<T>, path: &Path) -> std::result::Result<T, CliError> {
    r.map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Configuration built from flags (optionally seeded by a file) is the
/// operator's input, so validation failures there are usage errors.
pub fn usage_check(r: vdpp::Result<()>) -> std::result::Result<(), CliError> {
    r.map_err(|e| usage(e.to_string()))
}

/// Parse an optional JSON config file into the command's partial-override
/// struct. Unknown keys are rejected, not ignored.
pub fn load_config_file<T: DeserializeOwned + Default>(
    path: Option<&Path>,
) -> std::result::Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config file {}: {e}", path.display())))
}

/// Write the fully-resolved configuration next to the run's outputs so the
/// run can be reproduced from the sidecar alone.
pub fn echo_config<T: Serialize>(out_dir: &Path, resolved: &T) -> CmdResult {
    fs::create_dir_all(out_dir)?;
    let text = serde_json::to_string_pretty(resolved).map_err(vdpp::Error::from)?;
    fs::write(out_dir.join("run_config.json"), text + "\n")?;
    Ok(())
}

/// Copy each `Some` field of a partial struct over the resolved struct;
/// later calls win, so apply the file first and the flags second.
macro_rules! apply_overrides {
    ($dst:expr, $src:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = $src.$field.clone() { $dst.$field = v; } )*
    };
}
pub(crate) use apply_overrides;

/// Like `apply_overrides` for fields that stay optional after resolution.
macro_rules! apply_optional {
    ($dst:expr, $src:expr; $($field:ident),* $(,)?) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field.clone(); } )*
    };
}
pub(crate) use apply_optional;

/// A freshly initialized model has a zero residual head, so with a = b = 0
/// the whole pipeline is the identity.
pub fn identity_model(cfg: RefinerConfig) -> std::result::Result<(RefinerModel, ScalerParams), CliError> {
    let model = RefinerModel::init(cfg).map_err(|e| usage(e.to_string()))?;
    Ok((model, ScalerParams { a: 0.0, b: 0.0 }))
}

/// Depth sequences under a root: either the root itself holds frames, or
/// each (sorted) child directory holds one sequence.
pub fn discover_sequences(root: &Path) -> std::result::Result<Vec<(String, PathBuf)>, CliError> {
    if !root.is_dir() {
        return Err(CliError::Runtime(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let has_frames = |dir: &Path| {
        fs::read_dir(dir).map_or(false, |it| {
            it.flatten()
                .any(|e| e.path().extension().is_some_and(|x| x == "pfm"))
        })
    };
    if has_frames(root) {
        let id = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into());
        return Ok(vec![(id, root.to_path_buf())]);
    }
    let mut dirs: Vec<(String, PathBuf)> = fs::read_dir(root)?
        .flatten()
        .filter(|e| e.path().is_dir() && has_frames(&e.path()))
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Runtime(format!(
            "no .pfm sequences under {}",
            root.display()
        )));
    }
    Ok(dirs)
}

pub fn load_one_sequence(dir: &Path) -> std::result::Result<DepthSequence, CliError> {
    Ok(load_sequence(dir, FRAME_PATTERN)?)
}

/// Reinterpret loaded values as disparities: depth = 1 / max(d, 1e-6).
pub fn disparity_to_depth(seq: &DepthSequence) -> std::result::Result<DepthSequence, CliError> {
    let frames = seq
        .frames()
        .iter()
        .map(|f| {
            let data = f.data().iter().map(|&d| 1.0 / d.max(1e-6)).collect();
            Tensor::new(f.shape(), data)
        })
        .collect::<vdpp::Result<Vec<_>>>()?;
    Ok(DepthSequence::new(frames, seq.frame_rate())?)
}
