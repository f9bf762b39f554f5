//! Training-free diffusion makeup editing.
//!
//! The engine inverts a face image to an intermediate diffusion time with
//! deterministic DDIM, applies region-masked makeup edits to the denoised
//! estimate in pixel space, then re-noises and samples back with
//! cross-attention prompt composition and interpolation guidance.

pub mod backend;
pub mod color;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod harmonize;
pub mod pipeline;
pub mod raster;
pub mod reference;
pub mod regions;
pub mod schedule;

pub use error::{Error, Result};
