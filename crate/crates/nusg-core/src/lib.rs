//! Nested U-structure segmentation core.
//!
//! Everything numeric lives here: a dense [`Tensor`] type with a reverse-mode
//! autodiff [`Graph`], the RSU block family and the residual soft-connection
//! module, the four model variants, deep-supervision losses, the evaluation
//! metric suite, and the AdamW optimizer with its warmup/cosine schedule.
//!
//! The crate is `no_std`-compatible (it only needs `alloc`); file formats,
//! dataset handling and the CLI live in the companion `nusg` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::CoreError;
pub use tensor::{FlopCount, Graph, Real, Tensor, VarId, FLOP_CONVENTION};

/// Convenience alias used throughout the crate.
pub type Result<T> = core::result::Result<T, CoreError>;
