//! Audio- and hand-pose-driven puppet animation, end to end on one CPU.
//!
//! The crate covers the whole pipeline: a procedural half-body puppet dataset
//! whose lip and hand motion are deterministic functions of a synthetic audio
//! track; a conditional latent-diffusion denoiser with reference-feature,
//! pose, and region-masked audio conditioning; a staged training curriculum
//! that shrinks the pose condition while widening the audio attention scope;
//! a timestep-phase-routed auxiliary loss; self-trained perception oracles;
//! and an evaluation suite (PSNR/SSIM, hand keypoint confidence/variance,
//! lip-sync correlation, identity similarity).
//!
//! Everything is deterministic given config and seeds: re-running any command
//! reproduces outputs bit-exactly.

pub mod audio_cond;
pub mod config;
pub mod curriculum;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod loss;
pub mod oracle;
pub mod pose;
pub mod rng;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
