//! Depth-map file I/O and visualization.
//!
//! Depth lives in PFM files (grayscale "Pf", 32-bit floats); visual artifacts
//! are binary PGM. Sequences are directories of PFM frames ordered by name.

mod pfm;
mod pgm;
mod sequence;
mod viz;

pub use pfm::{read_pfm, write_pfm};
pub use pgm::write_pgm;
pub use sequence::{load_sequence, save_sequence, DepthSequence, FRAME_PATTERN};
pub use viz::{render_gray, slit_scan, slit_scan_values, GrayImage, ScanAxis};
