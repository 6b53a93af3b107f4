//! Desk-scale synthetic lesion generation for CT volumes.
//!
//! The pipeline has three stages. A latent diffusion model trained on
//! truncated signed distance fields produces lesion shapes, a small
//! convolutional adapter restores surface detail lost in the linear latent
//! codec, and a conditioned texture model fills the shape with plausible
//! soft-tissue intensities before the result is feathered into a background
//! CT volume under placement constraints (soft-tissue HU window, region
//! membership, non-overlap).
//!
//! Everything is deterministic given a seed: reruns of the same configuration
//! produce byte-identical artifacts. See [`commands`] for the high-level entry
//! points the CLI wraps.

pub mod adapter;
mod artifact;
pub mod codec;
pub mod commands;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod sdf;
pub mod synthesis;
pub mod volume;

pub use error::{Error, Result};
