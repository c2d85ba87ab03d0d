//! Memory-augmented segmentation for unordered SAR image streams.
//!
//! A three-level (texture, structure, semantic) key-value memory is queried
//! per level with scaled dot-product attention, the per-level results are
//! fused with response-driven softmax weights and decoded by an affine head.
//! After each prediction a structure/semantic discrepancy gate decides which
//! memory levels are refreshed.

pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod memory;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod scene;
pub mod update;

pub use error::{Error, Result};
