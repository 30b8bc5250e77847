//! A self-contained single-stage object detection engine.
//!
//! The crate implements the full stack needed to train and run a small
//! multi-scale detector on 64x64 images:
//!
//! - [`tensor`] / [`tape`] / [`params`]: a minimal reverse-mode autodiff
//!   engine over dense 4-D tensors (conv, deconv, pooling, activations,
//!   losses) with SGD + momentum.
//! - [`backbone`]: a plain convolutional feature extractor producing a
//!   pyramid of source feature maps.
//! - [`resblock`]: residual feature-enrichment blocks that rebuild each
//!   pyramid level from two or three branches (the third pulls context
//!   from the next-coarser level through a stride-2 deconvolution).
//! - [`heads`]: box/class prediction heads, either one shared (unified)
//!   head applied to every level or one head per level (separate).
//! - [`boxes`]: default-box generation, IoU, ground-truth matching,
//!   offset encoding/decoding, NMS, and detection dump I/O.
//! - [`loss`]: multibox training loss with hard negative mining.
//! - [`detector`]: the inference path from an image batch to scored,
//!   NMS-filtered detections.
//! - [`pipeline`]: seeded two-stage training loop, LR schedule, and
//!   binary checkpoints.
//! - [`evalkit`]: average precision, size-bucketed AP, recall, latency
//!   benchmarking, and an analytic multiply-accumulate counter.
//! - [`shapesdata`]: a deterministic synthetic dataset of colored shapes
//!   with boxes, plus training-time augmentation.
//! - [`config`]: plain key=value experiment configuration.
//!
//! All numeric kernels are generic over [`Scalar`] (implemented for
//! `f32` and `f64`). Training and checkpointing use `f64`; `f32` exists
//! for benchmarking the forward path. The engine is deterministic: a
//! fixed seed reproduces identical results bit for bit.

pub mod backbone;
pub mod boxes;
pub mod config;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod heads;
pub mod loss;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod resblock;
pub mod scalar;
pub mod shapesdata;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision tensor used throughout training and evaluation.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision tensor for the benchmark-only forward path.
pub type Tensor32 = tensor::Tensor<f32>;
/// Default-precision autodiff tape.
pub type Tape64 = tape::Tape<f64>;
/// Single-precision autodiff tape.
pub type Tape32 = tape::Tape<f32>;
/// Default-precision parameter store.
pub type ParamStore64 = params::ParamStore<f64>;
/// Default-precision model (backbone + enrichment + heads).
pub type Model64 = model::Model<f64>;
/// Single-precision model for latency benchmarks.
pub type Model32 = model::Model<f32>;
