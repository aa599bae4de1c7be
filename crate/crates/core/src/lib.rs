//! Self-supervised LiDAR–camera fusion with masked autoencoders.
//!
//! Spherical LiDAR projections are split into patches, half of them are
//! hidden, a transformer encoder runs on the visible remainder and a
//! decoder reconstructs the full projection. Camera information enters
//! through a token-to-sequence cross-attention block in which the LiDAR
//! class token queries the camera patch tokens.
//!
//! Module map:
//! - [`lidar`]: point-cloud ingestion and spherical projection
//! - [`scenes`]: procedural paired LiDAR/camera scenes
//! - [`patching`]: patchification, mask planning, mask-token scattering
//! - [`nn`]: transformer substrate with hand-written backward passes
//! - [`fusion`]: class-token cross-attention fusion and its benchmark
//! - [`model`]: the full masked autoencoder and its loss
//! - [`metrics`]: SSIM and multiscale SSIM
//! - [`train`]: AdamW, cosine schedule, training/evaluation loops, checkpoints

pub mod config;
pub mod error;
pub mod flops;
pub mod fusion;
pub mod image;
pub mod lidar;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod patching;
pub mod rng;
pub mod scenes;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
