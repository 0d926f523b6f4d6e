//! Camera-LiDAR cross-modality gait recognition.
//!
//! This crate holds the pure algorithmic side of the system and builds without
//! `std` (it needs `alloc`):
//!
//! - [`tensor`], [`tape`], [`adam`], [`gradcheck`]: a small dense tensor core with
//!   reverse-mode differentiation, an Adam optimizer and finite-difference checks.
//! - [`geometry`]: pinhole projection and interpolation of point clouds into depth
//!   images, depth back-projection, voxel downsampling and frame normalization.
//! - [`synth`]: a procedural articulated walker rendered as synchronized silhouettes
//!   and point clouds, plus the pseudo-pair pipeline for externally estimated depth.
//! - [`network`]: the two-stream embedding network (modality-specific stem, shared
//!   residual stack, horizontal pooling, temporal pooling, per-part heads).
//! - [`losses`]: cross-modality triplet, combined fine-tuning loss and the symmetric
//!   contrastive pre-training loss (global and part-level).
//! - [`eval`]: gallery/probe construction, distance matrices and rank-k scoring.
//!
//! File formats, dataset persistence, the training driver and the command line live
//! in the companion `clgait` crate.
#![no_std]
// negated comparisons are used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod adam;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
mod kernels;
pub mod losses;
pub mod network;
pub mod real;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
