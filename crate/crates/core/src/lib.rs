//! Kernels, blocks and tooling for a compact 2D hand keypoint regressor:
//! dense blocks of (attention-augmented) inverted bottlenecks, blur-pooled
//! transitions, and direct regression of 21 keypoint coordinates.
//!
//! Everything runs on the CPU in deterministic `f64` (or `f32` with the
//! `f32` feature) with hand-written backward passes.

// Casts through `Float` are only no-ops in the default f64 build.
#![allow(clippy::unnecessary_cast)]

pub mod accounting;
pub mod attention;
pub mod blocks;
pub mod blurpool;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod persist;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{concat_channels, split_channels, Float, Shape, Tensor};
