use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::io::viz::GrayImage;

/// Write a binary PGM (P5, maxval 255), rows top-to-bottom.
pub fn write_pgm(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    let mut out = Vec::with_capacity(32 + image.pixels.len());
    out.extend_from_slice(format!("P5\n{} {}\n255\n", image.w, image.h).as_bytes());
    out.extend_from_slice(&image.pixels);
    fs::write(path, out)?;
    Ok(())
}
