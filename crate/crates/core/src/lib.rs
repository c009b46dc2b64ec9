//! Masked/unmasked face matching engine.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`imaging`] decodes and conditions face crops into fixed-size tensors.
//! 2. [`extractor`] runs an exported backbone (ONNX) and pools the feature map
//!    into a unit-norm [`Embedding`], or loads precomputed embeddings.
//! 3. [`knn`] indexes the unmasked gallery for exact nearest-neighbour lookup.
//! 4. [`matcher`] scores masked probes against the shortlist with cosine
//!    similarity and applies an acceptance threshold.
//! 5. [`evaluation`] aggregates match results into accuracy reports.

pub mod dataset;
pub mod embedding;
pub mod embedding_file;
pub mod evaluation;
pub mod extractor;
#[cfg(feature = "test-fixtures")]
pub mod fixtures;
pub mod fsutil;
pub mod imaging;
pub mod knn;
pub mod matcher;
mod mask;

pub use embedding::{cosine_similarity, global_average_pool, l2_normalize, Embedding};
pub use mask::MaskStatus;
