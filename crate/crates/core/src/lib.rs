//! Symmetric Correlation attention, a contribution index over attention
//! maps, greedy support pruning and a small multi-layer segmentation
//! pipeline, all operating on plain feature matrices.

pub mod correlation;
pub mod error;
pub mod lab;
pub mod pruning;
pub mod segmenter;
pub mod tensor;

pub use error::{Error, Result};
