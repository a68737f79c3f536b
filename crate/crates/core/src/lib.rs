//! Histologic remission classification pipeline.
//!
//! Data flows patient → segment → image. Images are classified
//! individually, and the per-image verdicts are then aggregated to one label
//! per segment.

pub mod checkpoint;
pub mod domain;
pub mod evaluate;
pub mod experiment;
pub mod models;
pub mod preprocess;
pub mod resample;
pub mod seed;
pub mod synth;
pub mod train;

/// An RGB image stored as `[H, W, 3]`, values in `[0, 1]` (or standardized).
pub type Image = remission_nn::Tensor<f32>;
