//! Masked-probe to unmasked-gallery matching.
//!
//! A probe is shortlisted with the K-NN index, every shortlisted entry is
//! scored by cosine similarity, and the best score is accepted when it
//! reaches the threshold. A rejection is a normal outcome, not an error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, Embedding};
use crate::knn::{GalleryIndex, IndexError, UNIT_TOLERANCE};

pub const DEFAULT_SHORTLIST_K: usize = 5;
/// Placeholder operating point; prefer [`calibrate_threshold`] per deployment.
pub const DEFAULT_THRESHOLD: f64 = 0.70;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("probe '{id}' is not unit length (norm {norm})")]
    ProbeNotNormalized { id: String, norm: f64 },
    #[error("gallery contains masked or unlabeled-status entries")]
    GalleryRoleViolation,
    #[error("invalid match configuration: {0}")]
    InvalidConfig(String),
    #[error("no scores to calibrate from")]
    EmptyScores,
    #[error("non-finite score")]
    NonFiniteScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub shortlist_k: usize,
    pub threshold: f64,
    pub require_unmasked_gallery: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { shortlist_k: DEFAULT_SHORTLIST_K, threshold: DEFAULT_THRESHOLD, require_unmasked_gallery: true }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        if self.shortlist_k == 0 {
            return Err(MatchError::InvalidConfig("shortlist_k must be at least 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(MatchError::InvalidConfig(format!("threshold {} outside [-1, 1]", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortlistEntry {
    pub source_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub probe_id: String,
    pub best_id: Option<String>,
    pub best_subject: Option<String>,
    pub similarity: f64,
    pub accepted: bool,
    /// Threshold the decision was made against.
    pub threshold: f64,
    /// Descending similarity, ties by ascending source id.
    pub shortlist: Vec<ShortlistEntry>,
}

/// Matches one probe against the gallery.
pub fn match_probe(probe: &Embedding, index: &GalleryIndex, cfg: &MatchConfig) -> Result<MatchResult, MatchError> {
    cfg.validate()?;
    if cfg.require_unmasked_gallery && !index.all_unmasked() {
        return Err(MatchError::GalleryRoleViolation);
    }
    if probe.dim() != index.dimension() {
        return Err(IndexError::DimensionMismatch { expected: index.dimension(), found: probe.dim() }.into());
    }
    if !probe.is_unit(UNIT_TOLERANCE) {
        return Err(MatchError::ProbeNotNormalized { id: probe.source_id.clone(), norm: probe.norm() });
    }

    let neighbors = index.query(&probe.values, cfg.shortlist_k)?;
    let mut scored: Vec<(ShortlistEntry, String)> = neighbors
        .into_iter()
        .map(|n| (ShortlistEntry { source_id: n.source_id, similarity: n.similarity }, n.subject))
        .collect();
    scored.sort_by(|(a, _), (b, _)| {
        b.similarity.total_cmp(&a.similarity).then_with(|| a.source_id.cmp(&b.source_id))
    });

    let (best_id, best_subject, similarity) = match scored.first() {
        Some((top, subject)) => (Some(top.source_id.clone()), Some(subject.clone()), top.similarity),
        None => (None, None, f64::NAN),
    };
    Ok(MatchResult {
        probe_id: probe.source_id.clone(),
        accepted: best_id.is_some() && similarity >= cfg.threshold,
        best_id,
        best_subject,
        similarity,
        threshold: cfg.threshold,
        shortlist: scored.into_iter().map(|(e, _)| e).collect(),
    })
}

/// Matches each probe in order.
pub fn match_all(probes: &[Embedding], index: &GalleryIndex, cfg: &MatchConfig) -> Result<Vec<MatchResult>, MatchError> {
    probes.iter().map(|p| match_probe(p, index, cfg)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    /// Fraction of correct decisions (genuine accepted plus impostor
    /// rejected) at `threshold`.
    pub accuracy: f64,
}

/// Candidate thresholds: -1, +1 and the midpoint of every pair of adjacent
/// distinct scores, ascending.
pub fn candidate_thresholds(scores: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut s: Vec<f64> = scores.into_iter().collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut out = Vec::with_capacity(s.len() + 1);
    out.push(-1.0);
    out.extend(s.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    out.push(1.0);
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Picks the threshold that maximizes decision accuracy over the genuine
/// (should accept) and impostor (should reject) scores. A score is
/// accepted when `score >= threshold`. Ties go to the larger threshold.
pub fn calibrate_threshold(genuine: &[f64], impostor: &[f64]) -> Result<Calibration, MatchError> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(MatchError::EmptyScores);
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(MatchError::NonFiniteScore);
    }
    let mut g = genuine.to_vec();
    let mut i = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    i.sort_by(f64::total_cmp);
    let total = g.len() + i.len();

    let mut best: Option<(usize, f64)> = None;
    for t in candidate_thresholds(g.iter().chain(&i).copied()) {
        // Number of scores strictly below t in each sorted list.
        let genuine_rejected = g.partition_point(|&s| s < t);
        let impostor_rejected = i.partition_point(|&s| s < t);
        let correct = (g.len() - genuine_rejected) + impostor_rejected;
        if best.is_none_or(|(c, _)| correct >= c) {
            best = Some((correct, t));
        }
    }
    let (correct, threshold) = best.expect("at least two candidates");
    Ok(Calibration { threshold, accuracy: correct as f64 / total as f64 })
}

/// Genuine and impostor similarity scores of every probe against every
/// gallery entry, split by whether the subjects agree.
pub fn genuine_impostor_scores(probes: &[Embedding], gallery: &[Embedding]) -> Result<(Vec<f64>, Vec<f64>), MatchError> {
    let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
    for p in probes {
        for g in gallery {
            let s = cosine_similarity(&p.values, &g.values).map_err(IndexError::from)?;
            match (&p.subject, &g.subject) {
                (Some(a), Some(b)) if a == b => genuine.push(s),
                (Some(_), Some(_)) => impostor.push(s),
                _ => {}
            }
        }
    }
    Ok((genuine, impostor))
}
