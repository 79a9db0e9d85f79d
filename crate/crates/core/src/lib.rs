//! Lightweight conditional control for a frozen diffusion backbone.
//!
//! The crate contains a small reverse-mode autodiff engine, a UNet
//! denoiser, two control strategies (a trainable-copy branch with
//! zero-initialized bridges, and a lightweight feature extractor whose
//! output is aligned to the backbone by cross normalization), the
//! fine-tuning loop, a synthetic edge-to-shape dataset, and benchmark and
//! report helpers.

pub mod archive;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod control;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod finetune;
pub mod graph;
pub mod nn;
pub mod params;
pub mod pgm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, FeatureMap, Tensor};
