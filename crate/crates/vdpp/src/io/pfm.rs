use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn pfm_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Pfm {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Pull the next whitespace-delimited token starting at `*pos`.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

/// Read a grayscale PFM depth map. The payload is stored bottom-to-top per
/// the PFM convention and is returned top-to-bottom; a negative scale line
/// means little-endian floats, positive means big-endian.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut pos = 0;

    let magic = next_token(&bytes, &mut pos).ok_or_else(|| pfm_err(path, "empty file"))?;
    match magic {
        b"Pf" => {}
        b"PF" => return Err(pfm_err(path, "unsupported: color PFM")),
        _ => return Err(pfm_err(path, "bad magic (expected \"Pf\")")),
    }

    let parse_dim = |tok: Option<&[u8]>, which: &str| -> Result<usize> {
        let tok = tok.ok_or_else(|| pfm_err(path, format!("missing {which}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| pfm_err(path, format!("bad {which}")))
    };
    let w = parse_dim(next_token(&bytes, &mut pos), "width")?;
    let h = parse_dim(next_token(&bytes, &mut pos), "height")?;

    let scale_tok = next_token(&bytes, &mut pos).ok_or_else(|| pfm_err(path, "missing scale"))?;
    let scale: f64 = std::str::from_utf8(scale_tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| pfm_err(path, "bad scale"))?;
    if scale == 0.0 {
        return Err(pfm_err(path, "scale must be nonzero"));
    }
    let little_endian = scale < 0.0;

    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(pfm_err(path, "missing separator before payload"));
    }
    pos += 1;

    let expected = w * h * 4;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(pfm_err(
            path,
            format!(
                "payload is {} bytes, expected {expected} for {w}x{h}",
                payload.len()
            ),
        ));
    }

    let mut values = vec![0.0f64; w * h];
    for (idx, chunk) in payload.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().expect("chunks_exact yields 4 bytes");
        let v = if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        if !v.is_finite() {
            return Err(pfm_err(path, format!("non-finite value at sample {idx}")));
        }
        // File row 0 is the bottom image row.
        let file_row = idx / w;
        let col = idx % w;
        values[(h - 1 - file_row) * w + col] = v as f64;
    }
    Tensor::new(&[h, w], values)
}

/// Write a grayscale PFM depth map (scale -1.0, little-endian). Values are
/// narrowed to 32-bit floats.
pub fn write_pfm(path: impl AsRef<Path>, frame: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if frame.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "write_pfm",
            shape: frame.shape().to_vec(),
            msg: "expected rank 2".into(),
        });
    }
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let mut out = Vec::with_capacity(32 + h * w * 4);
    out.extend_from_slice(format!("Pf\n{w} {h}\n-1.0\n").as_bytes());
    for i in (0..h).rev() {
        for j in 0..w {
            out.extend_from_slice(&(frame.at2(i, j) as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}
