//! Consistency-training segmentation.
//!
//! A conditional consistency model maps a noisy mask and its image to a clean
//! mask estimate in a single evaluation. Training couples an online parameter
//! set with an EMA target copy; the condition encoder supplies multi-scale
//! supervision signals fused into the denoiser by channel attention.
//!
//! Pure numerics (schedules, filtering, metrics) live in [`cts_core`].

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod networks;
pub mod ops;
pub mod params;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
