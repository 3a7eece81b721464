//! Video depth post-processing.
//!
//! Monocular depth estimators are sharp per frame but flicker across frames.
//! This crate stabilizes a depth video in two stages: a two-parameter
//! median-conditioned scaler that normalizes each frame's overall level, and
//! a small transformer that attends over a sliding window of frames and adds
//! a residual correction. Both stages are differentiable end to end and train
//! against a spatial alignment loss plus a temporal gradient-matching loss.
//!
//! The crate also ships the surrounding toolkit: depth-map file I/O, synthetic
//! scene generation with controlled temporal degradation, accuracy and
//! temporal-stability metrics, a perturbation sensitivity study, and a
//! from-scratch trainer. Everything is deterministic given a seed.

pub mod error;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod refiner;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
