//! Lossy unpaired image-to-image translation with extended cycle consistency
//! and a directional (paired-input) discriminator.
//!
//! The crate is organised around six parts:
//!
//! * [`synthbench`]: procedural endoluminal scenes rendered into an
//!   appearance domain (A: shading, tint, texture, specular highlights) and a
//!   structure domain (B: shaded geometry or normalized depth).
//! * [`nets`]: generators, patch discriminators, the directional
//!   discriminator and spectral normalization, on top of [`autodiff`].
//! * [`losses`]: every adversarial, cycle, extended-cycle, directional and
//!   identity term, plus the composite objective for the three variants.
//! * [`trainer`]: deterministic training with replay buffers, Adam,
//!   checkpoints and translation.
//! * [`metrics`]: SSIM, depth RMSE, cycle depth accuracy, histogram
//!   equalization and the information-hiding diagnostics.
//! * [`config`]: the flat `key = value` run configuration.

pub mod autodiff;
pub mod config;
mod conv;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod synthbench;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
