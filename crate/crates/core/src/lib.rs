//! Point-supervised video salient object detection.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`graph`]: dense tensors and a reverse-mode autodiff tape.
//! * [`nn`]: parameter store, linear layers, layer norm, transformer blocks.
//! * [`encoder`]: token-based image encoder with overlapping soft splits.
//! * [`fusion`]: RGB/flow token fusion gates and cross-frame attention.
//! * [`decoder`]: cascade decoder with edge gating and saliency heads.
//! * [`model`]: the assembled per-clip network.
//! * [`supervision`]: point-prompted pseudo-labels, edge targets, losses.
//! * [`metrics`]: MAE, max F-beta, structure measure.
//! * [`io`]: flow/image/annotation/checkpoint formats and the synthetic
//!   clip generator.
//! * [`config`] / [`optim`] / [`pipeline`]: run configuration, optimizers,
//!   and the train / infer / eval / pseudolabel / synth entry points.
//!
//! All numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below pin the two concrete instantiations.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod fusion;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod supervision;
pub mod tensor;

pub use scalar::Scalar;

/// Single-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision autodiff graph.
pub type Graph32 = graph::Graph<f32>;
/// Double-precision autodiff graph.
pub type Graph64 = graph::Graph<f64>;
