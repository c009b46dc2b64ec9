//! Embedding vectors and the similarity math over them.
//!
//! Storage is `f32`; every reduction accumulates in `f64` in index order so
//! results do not depend on how callers batch their work.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::Tensor3;
use crate::MaskStatus;

/// Default embedding width: channel count of the last VGG-16 conv stage.
pub const DEFAULT_DIM: usize = 512;
/// Norms below this are treated as zero.
pub const ZERO_NORM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("vector norm is zero")]
    ZeroVector,
    #[error("empty vector")]
    Empty,
    #[error("non-finite value in vector")]
    NonFinite,
}

/// A face embedding with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub source_id: String,
    /// `None` when the embedding is unlabeled.
    pub subject: Option<String>,
    pub mask_status: MaskStatus,
    pub values: Vec<f32>,
}

impl Embedding {
    pub fn new(
        source_id: impl Into<String>,
        subject: Option<String>,
        mask_status: MaskStatus,
        values: Vec<f32>,
    ) -> Result<Self, MathError> {
        if values.is_empty() {
            return Err(MathError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MathError::NonFinite);
        }
        Ok(Self {
            source_id: source_id.into(),
            subject: subject.filter(|s| !s.is_empty()),
            mask_status,
            values,
        })
    }

    /// Builds an embedding from raw values, scaling them to unit length.
    pub fn normalized<T: Copy + Into<f64>>(
        source_id: impl Into<String>,
        subject: Option<String>,
        mask_status: MaskStatus,
        raw: &[T],
    ) -> Result<Self, MathError> {
        let unit = l2_normalize(raw)?;
        Self::new(source_id, subject, mask_status, unit.into_iter().map(|v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn is_unit(&self, tolerance: f64) -> bool {
        (self.norm() - 1.0).abs() <= tolerance
    }
}

pub fn dot<A: Copy + Into<f64>, B: Copy + Into<f64>>(a: &[A], b: &[B]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum()
}

pub fn norm<T: Copy + Into<f64>>(v: &[T]) -> f64 {
    dot(v, v).sqrt()
}

/// Per-channel spatial mean of an `H x W x C` map.
pub fn global_average_pool(map: &Tensor3) -> Vec<f64> {
    let (h, w, c) = map.dims();
    let mut sums = vec![0.0f64; c];
    for pixel in map.values().chunks_exact(c) {
        for (s, v) in sums.iter_mut().zip(pixel) {
            *s += v;
        }
    }
    let area = (h * w) as f64;
    sums.into_iter().map(|s| s / area).collect()
}

/// Scales `v` to unit Euclidean length.
pub fn l2_normalize<T: Copy + Into<f64>>(v: &[T]) -> Result<Vec<f64>, MathError> {
    if v.is_empty() {
        return Err(MathError::Empty);
    }
    let n = norm(v);
    if !n.is_finite() {
        return Err(MathError::NonFinite);
    }
    if n < ZERO_NORM_TOLERANCE {
        return Err(MathError::ZeroVector);
    }
    Ok(v.iter().map(|&x| x.into() / n).collect())
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity<A: Copy + Into<f64>, B: Copy + Into<f64>>(a: &[A], b: &[B]) -> Result<f64, MathError> {
    if a.len() != b.len() {
        return Err(MathError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    if a.is_empty() {
        return Err(MathError::Empty);
    }
    let (aa, bb) = (dot(a, a), dot(b, b));
    if aa.sqrt() < ZERO_NORM_TOLERANCE || bb.sqrt() < ZERO_NORM_TOLERANCE {
        return Err(MathError::ZeroVector);
    }
    // sqrt(aa * bb) rather than sqrt(aa) * sqrt(bb): for a == b this is
    // exactly aa, so self-similarity comes out as exactly 1.
    let cos = dot(a, b) / (aa * bb).sqrt();
    if !cos.is_finite() {
        return Err(MathError::NonFinite);
    }
    Ok(cos.clamp(-1.0, 1.0))
}

/// `M[i][j] = cosine_similarity(probes[i], gallery[j])`.
pub fn similarity_matrix(probes: &[Embedding], gallery: &[Embedding]) -> Result<Vec<Vec<f64>>, MathError> {
    probes
        .iter()
        .map(|p| gallery.iter().map(|g| cosine_similarity(&p.values, &g.values)).collect())
        .collect()
}
