//! Adapter-based multilingual speech translation on a small tape-autodiff
//! transformer.
//!
//! The crate covers the full loop: a scalar-generic tensor core with
//! reverse-mode autodiff, a speech transformer (conv subsampling, sinusoidal
//! positions, encoder/decoder stacks, greedy decode), per-language adapter
//! banks with serial and parallel bottleneck cells, freeze-plan recipes,
//! Adam training with inverse-sqrt warmup and SpecAugment, corpus BLEU with
//! paired bootstrap significance, synthetic multilingual toy corpora, and a
//! checkpoint format shared by backbones and adapter banks.

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod recipes;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default 32-bit working precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// 64-bit precision for gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type Tape64 = tape::Tape<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
