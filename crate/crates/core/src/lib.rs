//! Attention-guided noise learning for diffusion deepfake detection.
//!
//! The pipeline treats any image as a diffusion state at a small timestep,
//! asks a denoising network for the noise it believes is present, turns the
//! per-pixel noise magnitude into a spatial attention map, and trains a
//! residual classifier whose last-stage features are modulated by that map.
//!
//! Modules:
//! - [`diffusion`]: schedules, forward/reverse processes, the ε-network and
//!   its training loop (also used to mint desk-scale fakes).
//! - [`probe`]: single-step noise estimation with an on-disk cache.
//! - [`attention`]: attention map construction and resizing.
//! - [`detector`]: the forensic classifier, BCE loss, training and inference.
//! - [`eval`]: ACC/AP, standard / cross-dataset / cross-model protocols,
//!   timestep sweeps, matrix I/O and reports.
//! - [`analysis`]: radial power spectra and local entropy maps.
//! - [`data`]: manifests, PNG I/O, procedural corpora and splits.

pub mod analysis;
pub mod attention;
pub mod data;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod probe;
pub mod resample;
pub mod rng;

pub use error::{Error, ErrorKind, Result};
