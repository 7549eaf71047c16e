//! Numeric core for consistency-training segmentation.
//!
//! Everything in this crate is pure computation over owned buffers: noise and
//! EMA schedules, the boundary-condition preconditioning coefficients,
//! Perona–Malik filtering, mask value codecs, and overlap metrics. It builds
//! without `std` so the same code can back host tooling and embedded
//! inference alike; IO, tensors and training live in the `cts` crate.

#![no_std]
#![deny(rust_2018_idioms)]

extern crate alloc;

pub mod ema;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod objective;
pub mod preprocess;
pub mod schedule;

pub use error::{Error, Result};
pub use grid::{Grid, ImageGrid, MaskGrid};
pub use schedule::{BoundaryCoeffs, ScheduleConfig};
