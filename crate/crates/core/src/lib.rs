//! Part-aligned person embeddings at desk scale.
//!
//! A small convolutional backbone feeds K learned part-attention branches;
//! the resulting unit-norm embeddings are trained with a triplet ranking
//! loss whose gradient is aggregated into one backward pass per sample.
//! Spatial-partition baselines (stripes, grids, global pooling, one FC
//! layer, externally fixed masks) share the same backbone and width so the
//! heads are directly comparable under the CMC/mAP retrieval harness.

pub mod cli;
pub mod error;
pub mod evalrank;
pub mod ndgrad;
pub mod partnet;
pub mod synthdata;
pub mod trainer;
pub mod tripletloss;

pub use error::{Error, Result};
