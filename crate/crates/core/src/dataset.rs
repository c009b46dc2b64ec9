//! On-disk dataset layout.
//!
//! A raw source tree has `with_mask/` and `without_mask/` folders. Images
//! inside are either named `<subject>__<imgid>.<ext>` or sit in a
//! per-subject subfolder as `<subject>/<imgid>.<ext>`.
//!
//! A prepared dataset keeps the same two folders with one PNG per record,
//! plus `manifest.csv` (`id,subject,mask_status,path`, paths relative to
//! the dataset root) and `truth.csv` (`probe_id,subject`) for the masked
//! records.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::atomic_write;
use crate::imaging::{decode_image, ImageRecord, ImagingError};
use crate::MaskStatus;

pub const WITH_MASK_DIR: &str = "with_mask";
pub const WITHOUT_MASK_DIR: &str = "without_mask";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TRUTH_FILE: &str = "truth.csv";
const SUBJECT_SEPARATOR: &str = "__";
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv error in {path}: {reason}")]
    Csv { path: PathBuf, reason: String },
    #[error("{0} has neither {WITH_MASK_DIR}/ nor {WITHOUT_MASK_DIR}/")]
    MissingLayout(PathBuf),
    #[error("cannot tell the subject of {0}")]
    UnlabeledFile(PathBuf),
    #[error("image {path}: {source}")]
    Image { path: PathBuf, source: ImagingError },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

pub fn mask_dir(mask: MaskStatus) -> &'static str {
    match mask {
        MaskStatus::Masked => WITH_MASK_DIR,
        _ => WITHOUT_MASK_DIR,
    }
}

/// `<subject>__<imgid>.<masked|unmasked>`
pub fn record_id(subject: &str, imgid: &str, mask: MaskStatus) -> String {
    format!("{subject}{SUBJECT_SEPARATOR}{imgid}.{mask}")
}

/// Inverse of [`record_id`].
pub fn split_record_id(id: &str) -> Option<(&str, &str, MaskStatus)> {
    let (stem, mask) = id.rsplit_once('.')?;
    let mask: MaskStatus = mask.parse().ok()?;
    if mask == MaskStatus::Unknown {
        return None;
    }
    let (subject, imgid) = parse_stem(stem)?;
    Some((subject, imgid, mask))
}

/// Splits a file stem `<subject>__<imgid>` at the first separator.
pub fn parse_stem(stem: &str) -> Option<(&str, &str)> {
    let (subject, imgid) = stem.split_once(SUBJECT_SEPARATOR)?;
    (!subject.is_empty() && !imgid.is_empty()).then_some((subject, imgid))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceImage {
    pub path: PathBuf,
    pub subject: String,
    pub imgid: String,
    pub mask: MaskStatus,
}

impl SourceImage {
    pub fn id(&self) -> String {
        record_id(&self.subject, &self.imgid, self.mask)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    out.sort();
    Ok(out)
}

fn file_stem(path: &Path) -> Option<&str> {
    path.file_stem().and_then(|s| s.to_str())
}

/// Lists the images of a raw source tree. Files whose subject cannot be
/// determined are returned separately. Non-image files are ignored.
pub fn scan_source(root: &Path) -> Result<(Vec<SourceImage>, Vec<DatasetError>), DatasetError> {
    let mut found = Vec::new();
    let mut problems = Vec::new();
    let mut any_layout = false;
    for mask in [MaskStatus::Masked, MaskStatus::Unmasked] {
        let dir = root.join(mask_dir(mask));
        if !dir.is_dir() {
            continue;
        }
        any_layout = true;
        for entry in sorted_entries(&dir)? {
            if entry.is_dir() {
                let Some(subject) = entry.file_name().and_then(|s| s.to_str()).map(str::to_owned) else {
                    problems.push(DatasetError::UnlabeledFile(entry));
                    continue;
                };
                for file in sorted_entries(&entry)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
                    match file_stem(&file) {
                        Some(stem) if !stem.is_empty() => {
                            let imgid = stem.to_owned();
                            found.push(SourceImage { path: file, subject: subject.clone(), imgid, mask });
                        }
                        _ => problems.push(DatasetError::UnlabeledFile(file)),
                    }
                }
            } else if is_image(&entry) {
                match file_stem(&entry).and_then(parse_stem) {
                    Some((subject, imgid)) => {
                        let (subject, imgid) = (subject.to_owned(), imgid.to_owned());
                        found.push(SourceImage { path: entry, subject, imgid, mask });
                    }
                    None => problems.push(DatasetError::UnlabeledFile(entry)),
                }
            }
        }
    }
    if !any_layout {
        return Err(DatasetError::MissingLayout(root.to_path_buf()));
    }
    Ok((found, problems))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub subject: String,
    pub mask_status: MaskStatus,
    /// Relative to the dataset root.
    pub path: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| DatasetError::Csv { path: path.to_path_buf(), reason: e.to_string() })?;
    }
    let bytes = w.into_inner().map_err(|e| DatasetError::Csv { path: path.to_path_buf(), reason: e.to_string() })?;
    atomic_write(path, &bytes).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DatasetError> {
    let text = fs::read(path).map_err(io_err(path))?;
    csv::Reader::from_reader(text.as_slice())
        .deserialize()
        .collect::<Result<Vec<ManifestRow>, _>>()
        .map_err(|e| DatasetError::Csv { path: path.to_path_buf(), reason: e.to_string() })
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    probe_id: String,
    subject: String,
}

/// Writes `probe_id,subject` rows, sorted by probe id.
pub fn write_truth(path: &Path, truth: &HashMap<String, String>) -> Result<(), DatasetError> {
    let mut rows: Vec<_> = truth.iter().collect();
    rows.sort();
    let mut w = csv::Writer::from_writer(Vec::new());
    for (probe_id, subject) in rows {
        w.serialize(TruthRow { probe_id: probe_id.clone(), subject: subject.clone() })
            .map_err(|e| DatasetError::Csv { path: path.to_path_buf(), reason: e.to_string() })?;
    }
    let bytes = w.into_inner().map_err(|e| DatasetError::Csv { path: path.to_path_buf(), reason: e.to_string() })?;
    atomic_write(path, &bytes).map_err(io_err(path))
}

pub fn read_truth(path: &Path) -> Result<HashMap<String, String>, DatasetError> {
    let text = fs::read(path).map_err(io_err(path))?;
    csv::Reader::from_reader(text.as_slice())
        .deserialize()
        .map(|r| r.map(|t: TruthRow| (t.probe_id, t.subject)))
        .collect::<Result<HashMap<_, _>, _>>()
        .map_err(|e| DatasetError::Csv { path: path.to_path_buf(), reason: e.to_string() })
}

/// Ground truth for the masked rows of a manifest.
pub fn truth_from_manifest(rows: &[ManifestRow]) -> HashMap<String, String> {
    rows.iter()
        .filter(|r| r.mask_status == MaskStatus::Masked)
        .map(|r| (r.id.clone(), r.subject.clone()))
        .collect()
}

/// Decodes one manifest row into a record.
pub fn load_record(root: &Path, row: &ManifestRow) -> Result<ImageRecord, DatasetError> {
    let path = root.join(&row.path);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let image = decode_image(&bytes).map_err(|source| DatasetError::Image { path: path.clone(), source })?;
    ImageRecord::new(&row.id, &row.subject, row.mask_status, image)
        .map_err(|source| DatasetError::Image { path, source })
}
