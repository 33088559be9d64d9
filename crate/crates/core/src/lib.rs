//! Data-free quantization for a toy vision transformer.
//!
//! The pipeline trains a small full-precision ViT on a procedural shape
//! dataset, synthesizes calibration images from it by gradient descent on a
//! patch-similarity-entropy objective with an easy-to-hard crop schedule,
//! fits uniform quantizers from those images, computes per-hook activation
//! corrections, and evaluates the corrected quantized model — no real data
//! is needed at calibration time.

pub mod acm;
pub mod ckpt;
pub mod data;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use tensor::{Tape, Tensor, VarId};
