//! Post-training quantization for small decoder-only transformers, with a
//! normalization-only calibration pass that pulls the quantized model's
//! per-channel activation statistics back toward the float model.
//!
//! The crate is `no_std` + `alloc`. File formats, the command-line front end
//! and anything that touches a clock or the filesystem live in the companion
//! `normtweak` crate.
//!
//! Layout:
//! - [`numerics`]: dense tensors, kernels, a small reverse-mode tape, seeded RNG.
//! - [`model`]: the toy transformer, sampling, training.
//! - [`quant`]: RTN, group-wise, GPTQ and SmoothQuant.
//! - [`normtweak`]: the layer-by-layer norm tweaking pipeline.
//! - [`calib`]: calibration set construction.
//! - [`eval`]: perplexity, last-word accuracy, divergence profiles, tables.
#![no_std]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod calib;
pub mod error;
pub mod eval;
pub mod model;
pub mod normtweak;
pub mod numerics;
pub mod quant;

pub use error::{Error, Result};
pub use numerics::{Real, Rng, Tensor};
