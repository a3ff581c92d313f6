//! Nested U-structure segmentation toolkit: everything around the numeric
//! core — dataset discovery and augmentation, the training loop, the
//! checkpoint format, evaluation reports, and the inference benchmark.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod train;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
