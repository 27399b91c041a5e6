//! Few-shot class-incremental audio classification with an expandable
//! dual-embedding extractor and a prototype classifier with statistics-based
//! replay.

pub mod audio;
pub mod autodiff;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod ede;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod protocol;
pub mod stats;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
