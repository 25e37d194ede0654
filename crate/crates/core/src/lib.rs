//! Post-training quantization toolkit for low-bitwidth floating-point formats.
//!
//! The crate simulates minifloat (FP8/FP4) and uniform integer quantization of
//! `f32` tensors, picks per-tensor encodings and exponent biases by MSE grid
//! search, learns per-element rounding directions for 4-bit weights, and runs
//! small reference layer pipelines to compare quantized against full-precision
//! execution.
//!
//! Module map:
//!
//! * [`fpcodec`] minifloat and integer quantizers
//! * [`tensorstore`] tensors, the `FPQT` container, calibration sets, manifests, metrics
//! * [`formatsearch`] encoding/bias grid search and model-wide assignment
//! * [`adaround`] gradient-based rounding learning
//! * [`netsim`] reference forward kernels and pipeline runner
//! * [`cli`] the `fpq` command-line front end
//!
//! The `parallel` feature (on by default) evaluates data-parallel loops with
//! rayon; without it every loop runs sequentially with identical results.

pub mod adaround;
pub mod cli;
pub mod error;
pub mod fixtures;
pub mod formatsearch;
pub mod fpcodec;
pub mod netsim;
pub mod par;
pub mod tensorstore;

pub use error::{Error, Result};
pub use fpcodec::{FpFormat, IntQuantConfig};
pub use par::Exec;
pub use tensorstore::{CalibSet, QuantManifest, Tensor};
