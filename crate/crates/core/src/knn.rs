//! Exact K-nearest-neighbour index over labeled unit embeddings.
//!
//! Queries are a brute-force scan: O(n·d) per probe, no approximation.
//! Results are ordered by ascending distance with ties broken by ascending
//! source id, so output is identical across platforms and sort algorithms.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, Embedding, MathError};
use crate::MaskStatus;

/// Norm tolerance for entries and probes.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndexError {
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("dimension mismatch: index has {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding '{id}' is not unit length (norm {norm})")]
    NotNormalized { id: String, norm: f64 },
    #[error("embedding '{0}' has no subject label")]
    MissingSubject(String),
    #[error("duplicate source id '{0}'")]
    DuplicateId(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Math(#[from] MathError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `1 - cosine_similarity`.
    #[default]
    CosineDistance,
    Euclidean,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" | "cosine_distance" => Ok(Metric::CosineDistance),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(format!("unknown metric '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub source_id: String,
    pub subject: String,
    /// Distance under the index metric.
    pub distance: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone)]
struct Entry {
    source_id: String,
    subject: String,
    mask_status: MaskStatus,
    values: Vec<f32>,
}

/// Immutable gallery of labeled unit embeddings.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    dimension: usize,
    metric: Metric,
    entries: Vec<Entry>,
}

impl GalleryIndex {
    pub fn build(entries: &[Embedding], metric: Metric) -> Result<Self, IndexError> {
        let first = entries.first().ok_or(IndexError::EmptyGallery)?;
        let dimension = first.dim();
        let mut seen = HashSet::with_capacity(entries.len());
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            if e.dim() != dimension {
                return Err(IndexError::DimensionMismatch { expected: dimension, found: e.dim() });
            }
            if !e.is_unit(UNIT_TOLERANCE) {
                return Err(IndexError::NotNormalized { id: e.source_id.clone(), norm: e.norm() });
            }
            let subject = e.subject.clone().ok_or_else(|| IndexError::MissingSubject(e.source_id.clone()))?;
            if !seen.insert(e.source_id.as_str()) {
                return Err(IndexError::DuplicateId(e.source_id.clone()));
            }
            out.push(Entry {
                source_id: e.source_id.clone(),
                subject,
                mask_status: e.mask_status,
                values: e.values.clone(),
            });
        }
        Ok(Self { dimension, metric, entries: out })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when every entry was enrolled from an unmasked image.
    pub fn all_unmasked(&self) -> bool {
        self.entries.iter().all(|e| e.mask_status == MaskStatus::Unmasked)
    }

    /// `(source_id, subject)` of every entry in insertion order.
    pub fn labels(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|e| (e.source_id.as_str(), e.subject.as_str()))
    }

    fn check_probe(&self, probe: &[f32]) -> Result<(), IndexError> {
        if probe.len() != self.dimension {
            return Err(IndexError::DimensionMismatch { expected: self.dimension, found: probe.len() });
        }
        Ok(())
    }

    fn neighbor(&self, entry: &Entry, probe: &[f32]) -> Result<Neighbor, IndexError> {
        let similarity = cosine_similarity(probe, &entry.values)?;
        let distance = match self.metric {
            Metric::CosineDistance => 1.0 - similarity,
            Metric::Euclidean => probe
                .iter()
                .zip(&entry.values)
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum::<f64>()
                .sqrt(),
        };
        Ok(Neighbor { source_id: entry.source_id.clone(), subject: entry.subject.clone(), distance, similarity })
    }

    /// The `min(k, len)` nearest entries, ascending by distance then id.
    pub fn query(&self, probe: &[f32], k: usize) -> Result<Vec<Neighbor>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        self.check_probe(probe)?;
        let mut all = self
            .entries
            .iter()
            .map(|e| self.neighbor(e, probe))
            .collect::<Result<Vec<_>, _>>()?;
        let order = |a: &Neighbor, b: &Neighbor| {
            a.distance.total_cmp(&b.distance).then_with(|| a.source_id.cmp(&b.source_id))
        };
        let k = k.min(all.len());
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, order);
            all.truncate(k);
        }
        all.sort_by(order);
        Ok(all)
    }

    /// Majority subject among the `k` nearest neighbours.
    ///
    /// Vote ties go to the tied subject whose nearest member is closest, then
    /// to the lexicographically smaller subject.
    pub fn classify(&self, probe: &[f32], k: usize) -> Result<String, IndexError> {
        let neighbors = self.query(probe, k)?;
        // subject -> (votes, nearest distance)
        let mut tally: HashMap<&str, (usize, f64)> = HashMap::new();
        for n in &neighbors {
            let slot = tally.entry(n.subject.as_str()).or_insert((0, n.distance));
            slot.0 += 1;
        }
        let best = tally
            .into_iter()
            .min_by(|(sa, (va, da)), (sb, (vb, db))| {
                vb.cmp(va).then_with(|| da.total_cmp(db)).then_with(|| sa.cmp(sb))
            })
            .map(|(s, _)| s.to_string());
        Ok(best.expect("index is non-empty"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(id: &str, subject: &str, raw: &[f64]) -> Embedding {
        Embedding::normalized(id, Some(subject.into()), MaskStatus::Unmasked, raw).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Ok(u) = crate::l2_normalize(&v) {
                return u;
            }
        }
    }

    #[test]
    fn build_validates_entries() {
        let a = unit("a", "s", &[1.0, 0.0]);
        let b = unit("b", "s", &[0.0, 1.0]);
        let c = unit("c", "t", &[1.0, 1.0]);
        assert_eq!(GalleryIndex::build(&[a.clone(), b.clone(), c], Metric::default()).unwrap().len(), 3);
        assert_eq!(GalleryIndex::build(&[], Metric::default()).unwrap_err(), IndexError::EmptyGallery);

        let wide = unit("w", "s", &[1.0, 0.0, 0.0]);
        assert!(matches!(
            GalleryIndex::build(&[a.clone(), wide], Metric::default()),
            Err(IndexError::DimensionMismatch { expected: 2, found: 3 })
        ));

        let half = Embedding::new("h", Some("s".into()), MaskStatus::Unmasked, vec![0.5, 0.0]).unwrap();
        assert!(matches!(GalleryIndex::build(&[half], Metric::default()), Err(IndexError::NotNormalized { .. })));

        let unlabeled = Embedding::new("u", None, MaskStatus::Unmasked, vec![1.0, 0.0]).unwrap();
        assert!(matches!(GalleryIndex::build(&[unlabeled], Metric::default()), Err(IndexError::MissingSubject(_))));

        assert!(matches!(
            GalleryIndex::build(&[a.clone(), a], Metric::default()),
            Err(IndexError::DuplicateId(_))
        ));
        let _ = b;
    }

    #[test]
    fn exact_hit() {
        let g = [unit("a", "alice", &[0.3, 0.4, 0.5]), unit("b", "bob", &[-1.0, 0.2, 0.0])];
        let idx = GalleryIndex::build(&g, Metric::CosineDistance).unwrap();
        let hit = &idx.query(&g[0].values, 1).unwrap()[0];
        assert_eq!(hit.source_id, "a");
        assert_eq!(hit.similarity, 1.0);
        assert_eq!(hit.distance, 0.0);
    }

    #[test]
    fn hand_computed_ordering() {
        let g = [unit("e1", "x", &[1.0, 0.0]), unit("e2", "y", &[0.0, 1.0])];
        let idx = GalleryIndex::build(&g, Metric::CosineDistance).unwrap();
        let probe = unit("p", "?", &[0.8, 0.6]);
        let n = idx.query(&probe.values, 2).unwrap();
        assert_eq!(n[0].source_id, "e1");
        assert!((n[0].similarity - 0.8).abs() < 1e-7);
        assert!((n[1].similarity - 0.6).abs() < 1e-7);
    }

    #[test]
    fn large_k_returns_everything_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g: Vec<_> = (0..9).map(|i| unit(&format!("g{i}"), "s", &random_unit(&mut rng, 5))).collect();
        let idx = GalleryIndex::build(&g, Metric::CosineDistance).unwrap();
        let n = idx.query(&random_unit(&mut rng, 5).iter().map(|&v| v as f32).collect::<Vec<_>>(), 50).unwrap();
        assert_eq!(n.len(), 9);
        assert!(n.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn ties_break_by_source_id() {
        let g = [unit("b", "s", &[1.0, 0.0]), unit("a", "t", &[1.0, 0.0]), unit("c", "u", &[0.0, 1.0])];
        let idx = GalleryIndex::build(&g, Metric::Euclidean).unwrap();
        let n = idx.query(&[1.0, 0.0], 2).unwrap();
        assert_eq!(n.iter().map(|x| x.source_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn query_errors() {
        let idx = GalleryIndex::build(&[unit("a", "s", &[1.0, 0.0])], Metric::default()).unwrap();
        assert_eq!(idx.query(&[1.0, 0.0], 0).unwrap_err(), IndexError::InvalidK);
        assert!(matches!(idx.query(&[1.0], 1), Err(IndexError::DimensionMismatch { .. })));
    }

    #[test]
    fn euclidean_neighbors_satisfy_chord_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g: Vec<_> = (0..20).map(|i| unit(&format!("g{i}"), "s", &random_unit(&mut rng, 8))).collect();
        let idx = GalleryIndex::build(&g, Metric::Euclidean).unwrap();
        let probe: Vec<f32> = random_unit(&mut rng, 8).iter().map(|&v| v as f32).collect();
        for n in idx.query(&probe, 20).unwrap() {
            assert!((n.distance.powi(2) - (2.0 - 2.0 * n.similarity)).abs() < 1e-6);
        }
    }

    #[test]
    fn classify_majority_and_ties() {
        // Three neighbours: two of A, one of B (B nearest).
        let g = [
            unit("b1", "B", &[1.0, 0.0]),
            unit("a1", "A", &[0.9, 0.1]),
            unit("a2", "A", &[0.8, 0.2]),
            unit("c1", "C", &[-1.0, 0.0]),
        ];
        let idx = GalleryIndex::build(&g, Metric::CosineDistance).unwrap();
        assert_eq!(idx.classify(&[1.0, 0.0], 3).unwrap(), "A");
        assert_eq!(idx.classify(&[1.0, 0.0], 1).unwrap(), "B");
        // k = 2: one vote each for B and A; B's member is strictly nearer.
        assert_eq!(idx.classify(&[1.0, 0.0], 2).unwrap(), "B");
    }

    #[test]
    fn classify_residual_tie_is_lexicographic() {
        let g = [unit("x", "Zed", &[1.0, 0.0]), unit("y", "Amy", &[0.0, 1.0])];
        let idx = GalleryIndex::build(&g, Metric::CosineDistance).unwrap();
        let probe = unit("p", "?", &[1.0, 1.0]);
        assert_eq!(idx.classify(&probe.values, 2).unwrap(), "Amy");
    }

    #[test]
    fn classify_self_with_k1() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g: Vec<_> = (0..15).map(|i| unit(&format!("g{i}"), &format!("s{}", i % 4), &random_unit(&mut rng, 6))).collect();
        let idx = GalleryIndex::build(&g, Metric::CosineDistance).unwrap();
        for e in &g {
            assert_eq!(&idx.classify(&e.values, 1).unwrap(), e.subject.as_ref().unwrap());
        }
    }

    #[test]
    fn repeat_queries_are_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g: Vec<_> = (0..30).map(|i| unit(&format!("g{i}"), "s", &random_unit(&mut rng, 4))).collect();
        let idx = GalleryIndex::build(&g, Metric::CosineDistance).unwrap();
        let probe: Vec<f32> = random_unit(&mut rng, 4).iter().map(|&v| v as f32).collect();
        assert_eq!(idx.query(&probe, 7).unwrap(), idx.query(&probe, 7).unwrap());
    }
}
