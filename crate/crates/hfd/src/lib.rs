//! File formats, training driver and command-line tool around `hfd-core`.
//!
//! Images are PNG or binary PNM; bitstreams use the `HFDC` container from
//! the core crate; checkpoints use the `HFDK` container defined here.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod imageio;
pub mod parallel;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod training;

pub use error::{HfdError, Result};
