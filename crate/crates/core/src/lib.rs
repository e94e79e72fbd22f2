//! Core library for the musemask pipeline.
//!
//! Two diffusion stages over a synthetic corpus of layered face-like scenes:
//! a text-conditioned mask editor operating in the latent space of a
//! mask-aware autoencoder, and a semantic-map-conditioned image editor with
//! a zero-convolution control branch. Everything runs on CPU with f32 math
//! and is deterministic under a fixed seed.

pub mod autoencoder;
pub mod checkpoint;
pub mod diffusion_core;
pub mod edit_control;
pub mod error;
pub mod mask_unet;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod semantic_maps;
pub mod synth_dataset;

pub use error::{Error, Result};
