//! Low-level distortion perception laboratory.
//!
//! Synthesizes distorted image corpora, trains a tiny vision encoder /
//! projector / language model stack with per-component parameter activation,
//! and measures how fine-tuning moves visual features relative to distortion
//! label tokens.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod distortion;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
