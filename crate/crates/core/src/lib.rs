//! Hip landmark detection from B-mode ultrasound: a dual-branch feature
//! extractor (U-Net + patch transformer) fused by mutual modulation, refined by
//! a topological GCN over the six landmark heatmaps, with a class head guided
//! by the Graf rule.
//!
//! Everything runs on a small reverse-mode tensor engine ([`autodiff`]) that is
//! generic over `f32`/`f64`; training is `f32`, gradient checks use `f64`.
//!
//! Module map:
//! - [`tensor`], [`autodiff`], [`nn`]: numeric substrate, parameters, TGT1 dumps
//! - [`backbone`]: local (U-Net) and global (patch transformer) branches, heatmap head
//! - [`mmf`]: mutual modulation fusion of the two branches
//! - [`tgcn`]: landmark graph, GCN refinement, class head
//! - [`model`]: the assembled network and its ablation variants
//! - [`train`]: ground-truth heatmaps, augmentation, joint loss, Adam, checkpoints
//! - [`synth`]: synthetic Graf-geometry phantoms
//! - [`eval`]: decoding, MRE/SDR, Graf angles, k-fold and ablation harness
//! - [`config`]: flat `key = value` run configuration

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod mmf;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod tgcn;
pub mod train;

pub use autodiff::{Tape, Var};
pub use config::RunConfig;
pub use data::{Dataset, ImageSample};
pub use error::{Error, ErrorCategory, Result};
pub use geometry::{LandmarkSet, Point, NUM_LANDMARKS};
pub use model::{ModelConfig, ModelOutput, TgcnIcf, Variant};
pub use tensor::{Element, Tensor};
