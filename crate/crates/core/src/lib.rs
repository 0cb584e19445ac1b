//! Numerical core for two-stage generative image compression.
//!
//! A deterministic transform codec produces the bitstream and a coarse
//! reconstruction; a score-based decoder (v-prediction diffusion on a
//! shifted log-SNR schedule, or a paired rectified flow) then refines that
//! reconstruction. Large images are refined patch-wise with a four-group,
//! multi-stage outpainting schedule.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! thread pools live in the `hfd` companion crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod codec;
pub mod denoise;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod exec;
pub mod image;
pub mod rectflow;
pub mod rng;
pub mod schedule;
pub mod tiler;

mod math;

pub use error::{Error, Result};
pub use nalgebra;
pub use image::{Dims, ImageBuffer, Patch};
pub use rng::SeededStream;
pub use schedule::{NoiseSchedule, TimeGrid};
