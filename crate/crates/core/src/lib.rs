//! Dynamic neural textures for talking-face synthesis with continuously
//! controllable expression type and intensity.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. Everything here is pure computation: the synthetic face model,
//! the software rasterizer, the trainable networks (on a small reverse-mode
//! tape), the losses and the evaluation metrics. File formats, the CLI and the
//! live session server live in the `dntx` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod audio_exp;
pub mod audit;
pub mod ciec;
pub mod decouple;
pub mod dyntex;
pub mod error;
pub mod face;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
mod real;
pub mod render;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod teeth;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;

pub(crate) use error::shape_err_fmt;
