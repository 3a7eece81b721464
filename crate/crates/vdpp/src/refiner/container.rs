//! Versioned binary container for model weights ("VDPPM1").
//!
//! Layout: 6-byte magic, config (six u32 fields, ratio as f64, seed as u64,
//! all little-endian), a u32 block count, then named blocks: u32 name
//! length, UTF-8 name, u32 rank, u32 extents, f64 little-endian values.
//! The scaler coefficients ride along as two [1] blocks `scaler.a` and
//! `scaler.b` so a checkpoint restores the whole pipeline.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::ScalerParams;
use crate::tensor::Tensor;

use super::{param_specs, RefinerConfig, RefinerModel};

pub const MODEL_MAGIC: &[u8; 6] = b"VDPPM1";

/// One named tensor read back from a container.
pub struct ParamBlock {
    pub name: String,
    pub tensor: Tensor,
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], ctx: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::ModelFormat(format!("truncated {ctx}"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, ctx: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, ctx)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, ctx: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, ctx)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, ctx: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, ctx)?;
    Ok(f64::from_le_bytes(b))
}

/// Write named tensors as container blocks.
pub fn write_blocks<'a, I>(w: &mut impl Write, blocks: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    for (name, tensor) in blocks {
        let name_len = u32::try_from(name.len())
            .map_err(|_| Error::InvalidArg(format!("parameter name `{name}` too long")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &e in tensor.shape() {
            let e = u32::try_from(e)
                .map_err(|_| Error::InvalidArg(format!("extent {e} exceeds container range")))?;
            w.write_all(&e.to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read `count` container blocks; `kind` names the file flavor in errors.
pub fn read_blocks(r: &mut impl Read, count: usize, kind: &str) -> Result<Vec<ParamBlock>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let head_ctx = format!("{kind} file (block {i})");
        let name_len = read_u32(r, &head_ctx)? as usize;
        if name_len == 0 || name_len > 4096 {
            return Err(Error::ModelFormat(format!(
                "implausible name length {name_len} in block {i}"
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(r, &mut name_bytes, &head_ctx)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::ModelFormat(format!("non-UTF-8 parameter name in block {i}")))?;
        let ctx = format!("{kind} file in parameter `{name}`");
        let rank = read_u32(r, &ctx)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::ModelFormat(format!(
                "implausible rank {rank} for parameter `{name}`"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let e = read_u32(r, &ctx)? as usize;
            len = len.checked_mul(e).filter(|&l| l <= 1 << 32).ok_or_else(|| {
                Error::ModelFormat(format!("implausible extents for parameter `{name}`"))
            })?;
            shape.push(e);
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(read_f64(r, &ctx)?);
        }
        out.push(ParamBlock {
            name,
            tensor: Tensor::new(&shape, data)?,
        });
    }
    Ok(out)
}

/// Write a model checkpoint: config, all parameters, and the scaler.
pub fn save_model(path: &Path, model: &RefinerModel, scaler: ScalerParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    let cfg = model.config();
    for v in [
        cfg.patch,
        cfg.embed_dim,
        cfg.heads,
        cfg.enc_blocks,
        cfg.dec_blocks,
        cfg.window,
    ] {
        let v = u32::try_from(v)
            .map_err(|_| Error::InvalidArg(format!("config field {v} exceeds container range")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&cfg.ratio.to_le_bytes())?;
    w.write_all(&cfg.seed.to_le_bytes())?;
    let n_blocks = model.params().len() + 2;
    w.write_all(&(n_blocks as u32).to_le_bytes())?;
    let a = Tensor::scalar(scaler.a)?;
    let b = Tensor::scalar(scaler.b)?;
    write_blocks(
        &mut w,
        model
            .params()
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .chain([("scaler.a", &a), ("scaler.b", &b)]),
    )?;
    w.flush()?;
    Ok(())
}

/// Load a model checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<(RefinerModel, ScalerParams)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    read_exact(&mut r, &mut magic, "model file header")?;
    if &magic != MODEL_MAGIC {
        if magic.starts_with(b"VDPPM") {
            return Err(Error::ModelFormat(format!(
                "unsupported model container version `{}`",
                magic[5] as char
            )));
        }
        return Err(Error::ModelFormat("not a VDPP model file".into()));
    }
    let ctx = "model file header";
    let cfg = RefinerConfig {
        patch: read_u32(&mut r, ctx)? as usize,
        embed_dim: read_u32(&mut r, ctx)? as usize,
        heads: read_u32(&mut r, ctx)? as usize,
        enc_blocks: read_u32(&mut r, ctx)? as usize,
        dec_blocks: read_u32(&mut r, ctx)? as usize,
        window: read_u32(&mut r, ctx)? as usize,
        ratio: read_f64(&mut r, ctx)?,
        seed: read_u64(&mut r, ctx)?,
    };
    cfg.validate()?;
    let n_blocks = read_u32(&mut r, ctx)? as usize;
    let blocks = read_blocks(&mut r, n_blocks, "model")?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::ModelFormat(
            "trailing data after the last parameter block".into(),
        ));
    }

    let specs = param_specs(&cfg);
    let mut slots: Vec<Option<Tensor>> = vec![None; specs.len()];
    let mut a = None;
    let mut b = None;
    for blk in blocks {
        let scalar_slot = match blk.name.as_str() {
            "scaler.a" => Some(&mut a),
            "scaler.b" => Some(&mut b),
            _ => None,
        };
        if let Some(slot) = scalar_slot {
            if blk.tensor.shape() != [1] {
                return Err(Error::ModelFormat(format!(
                    "parameter `{}` must be a scalar",
                    blk.name
                )));
            }
            if slot.replace(blk.tensor.data()[0]).is_some() {
                return Err(Error::ModelFormat(format!(
                    "duplicate parameter `{}`",
                    blk.name
                )));
            }
            continue;
        }
        let at = specs
            .iter()
            .position(|(n, _)| *n == blk.name)
            .ok_or_else(|| {
                Error::ModelFormat(format!("unknown parameter name `{}`", blk.name))
            })?;
        if specs[at].1 != blk.tensor.shape() {
            return Err(Error::ModelFormat(format!(
                "parameter `{}` has shape {:?}, expected {:?}",
                blk.name,
                blk.tensor.shape(),
                specs[at].1
            )));
        }
        if slots[at].replace(blk.tensor).is_some() {
            return Err(Error::ModelFormat(format!(
                "duplicate parameter `{}`",
                blk.name
            )));
        }
    }
    let params: Vec<(String, Tensor)> = specs
        .into_iter()
        .zip(slots)
        .map(|((name, _), slot)| {
            slot.map(|t| (name.clone(), t))
                .ok_or_else(|| Error::ModelFormat(format!("missing parameter `{name}`")))
        })
        .collect::<Result<_>>()?;
    let scaler = ScalerParams {
        a: a.ok_or_else(|| Error::ModelFormat("missing parameter `scaler.a`".into()))?,
        b: b.ok_or_else(|| Error::ModelFormat("missing parameter `scaler.b`".into()))?,
    };
    Ok((RefinerModel::from_parts(cfg, params)?, scaler))
}
