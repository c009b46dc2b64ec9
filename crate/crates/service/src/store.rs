//! Persistent gallery with snapshot reads and serialized writes.
//!
//! Readers load the current [`Snapshot`] without locking. Writers take a
//! mutex, persist the new state to disk, and only then publish the new
//! snapshot, so an acknowledged mutation is never lost.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;
use mufm_core::embedding::MathError;
use mufm_core::embedding_file::{EmbeddingFile, EmbeddingFileError, FileFormat};
use mufm_core::knn::{GalleryIndex, IndexError, Metric, UNIT_TOLERANCE};
use mufm_core::matcher::{match_probe, MatchConfig, MatchError, MatchResult};
use mufm_core::{Embedding, MaskStatus};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store file: {0}")]
    File(#[from] EmbeddingFileError),
    #[error("store holds dimension {found}, configured {expected}")]
    StoreDimension { expected: usize, found: usize },
    #[error("store entry '{0}' is not an unmasked gallery entry")]
    StoreRole(String),
    #[error("dimension mismatch: gallery has {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("source id '{0}' already enrolled")]
    Duplicate(String),
    #[error("no gallery entry '{0}'")]
    NotFound(String),
    #[error("subject must be non-empty")]
    EmptySubject,
    #[error("invalid vector: {0}")]
    InvalidVector(#[from] MathError),
    #[error("gallery is empty")]
    EmptyGallery,
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// An immutable view of the gallery at one generation.
#[derive(Debug)]
pub struct Snapshot {
    pub generation: u64,
    pub entries: Vec<Embedding>,
    index: Option<GalleryIndex>,
}

impl Snapshot {
    fn build(generation: u64, entries: Vec<Embedding>) -> Result<Self, StoreError> {
        let index = if entries.is_empty() { None } else { Some(GalleryIndex::build(&entries, Metric::CosineDistance)?) };
        Ok(Self { generation, entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, source_id: &str) -> bool {
        self.entries.iter().any(|e| e.source_id == source_id)
    }

    /// Matches a raw probe vector, normalizing it first.
    pub fn match_vector(&self, probe_id: &str, values: &[f64], cfg: &MatchConfig) -> Result<MatchResult, StoreError> {
        let index = self.index.as_ref().ok_or(StoreError::EmptyGallery)?;
        if values.len() != index.dimension() {
            return Err(StoreError::DimensionMismatch { expected: index.dimension(), found: values.len() });
        }
        let probe = Embedding::normalized(probe_id, None, MaskStatus::Masked, values)?;
        Ok(match_probe(&probe, index, cfg)?)
    }
}

pub struct GalleryStore {
    path: PathBuf,
    dimension: usize,
    current: ArcSwap<Snapshot>,
    writer: Mutex<()>,
}

impl GalleryStore {
    /// Opens the store at `path`, creating an empty one of `dimension` if
    /// the file does not exist. A non-empty store must match `dimension`.
    pub fn open(path: &Path, dimension: usize) -> Result<Self, StoreError> {
        let entries = if path.exists() {
            let file = EmbeddingFile::read(path)?;
            if !file.rows().is_empty() && file.dimension() != dimension {
                return Err(StoreError::StoreDimension { expected: dimension, found: file.dimension() });
            }
            file.into_rows()
                .into_iter()
                .map(|e| {
                    if e.mask_status != MaskStatus::Unmasked || e.subject.is_none() {
                        return Err(StoreError::StoreRole(e.source_id));
                    }
                    if e.is_unit(UNIT_TOLERANCE) {
                        Ok(e)
                    } else {
                        Ok(Embedding::normalized(e.source_id, e.subject, e.mask_status, &e.values)?)
                    }
                })
                .collect::<Result<Vec<_>, _>>()?
        } else {
            EmbeddingFile::new(dimension, Vec::new())?.write(path, FileFormat::Binary)?;
            Vec::new()
        };
        log::info!("opened gallery store {} with {} entries", path.display(), entries.len());
        Ok(Self {
            path: path.to_path_buf(),
            dimension,
            current: ArcSwap::from_pointee(Snapshot::build(0, entries)?),
            writer: Mutex::new(()),
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.load_full()
    }

    fn commit(&self, current: &Snapshot, entries: Vec<Embedding>) -> Result<u64, StoreError> {
        let next = Snapshot::build(current.generation + 1, entries)?;
        EmbeddingFile::new(self.dimension, next.entries.clone())?.write(&self.path, FileFormat::Binary)?;
        let generation = next.generation;
        self.current.store(Arc::new(next));
        Ok(generation)
    }

    /// Adds an unmasked entry. Without a `source_id`, `<subject>-<n>` is
    /// assigned with the smallest free `n`. Returns the id and the new
    /// generation.
    pub fn enroll(&self, subject: &str, values: &[f64], source_id: Option<&str>) -> Result<(String, u64), StoreError> {
        if subject.is_empty() {
            return Err(StoreError::EmptySubject);
        }
        if values.len() != self.dimension {
            return Err(StoreError::DimensionMismatch { expected: self.dimension, found: values.len() });
        }
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let current = self.current.load_full();
        let id = match source_id {
            Some(id) if current.contains(id) => return Err(StoreError::Duplicate(id.to_owned())),
            Some(id) => id.to_owned(),
            None => (1..)
                .map(|n| format!("{subject}-{n}"))
                .find(|id| !current.contains(id))
                .expect("unbounded range"),
        };
        let entry = Embedding::normalized(id.clone(), Some(subject.to_owned()), MaskStatus::Unmasked, values)?;
        let mut entries = current.entries.clone();
        entries.push(entry);
        let generation = self.commit(&current, entries)?;
        log::info!("enrolled {id} for {subject} at generation {generation}");
        Ok((id, generation))
    }

    /// Removes an entry and returns the new generation.
    pub fn remove(&self, source_id: &str) -> Result<u64, StoreError> {
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let current = self.current.load_full();
        if !current.contains(source_id) {
            return Err(StoreError::NotFound(source_id.to_owned()));
        }
        let entries = current.entries.iter().filter(|e| e.source_id != source_id).cloned().collect();
        let generation = self.commit(&current, entries)?;
        log::info!("removed {source_id} at generation {generation}");
        Ok(generation)
    }
}
