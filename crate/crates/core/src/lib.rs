//! Desk-scale laboratory for articulated noise transport in video diffusion.
//!
//! A 2D capsule puppet is rendered to motion maps (per-pixel UV + part id),
//! a time-independent Gaussian noise texture is warped along those maps,
//! degraded, and fed through a small latent diffusion stack. Training adds a
//! motion-decoding head and a texel-space noise-consistency loss; inference
//! animates a reference frame along a driving pose sequence with a
//! deterministic sampler. Everything is seeded and reproducible.

pub mod body;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evalmetrics;
pub mod io;
pub mod noisefield;
pub mod numeric;
pub mod pipeline;
pub mod raster;
pub mod selfcheck;
pub mod training;

pub use error::{Error, Result};
pub use numeric::tensor::Tensor;
