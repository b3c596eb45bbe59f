//! Video shadow detection: box-prompted mask segmentation of a seed frame,
//! propagated through the clip by a long short-term attention network.

pub mod checkpoint;
pub mod data_io;
pub mod lstn;
mod error;
pub mod metrics;
pub mod nn;
pub mod prompt_gen;
pub mod propagation;
pub mod segmenter;
pub mod synthetic;

pub use error::{Error, Result};
