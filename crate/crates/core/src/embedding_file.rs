//! On-disk embedding collections.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! "MUFM" | u32 version | u32 dimension | u64 count
//! count x ( u32 len | source_id utf-8
//!         | u32 len | subject utf-8 (len 0 = unlabeled)
//!         | u8 mask_status (0 unknown, 1 masked, 2 unmasked)
//!         | dimension x f32 )
//! ```
//!
//! The JSON-lines variant starts with a header object
//! `{"format":"MUFM","version":1,"dimension":D,"count":N}` followed by one
//! [`Embedding`] object per line. Readers pick the variant from the first
//! byte.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{Embedding, MathError};
use crate::fsutil::atomic_write;
use crate::MaskStatus;

pub const MAGIC: &[u8; 4] = b"MUFM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbeddingFileError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("row {row} has {found} values, header declares {expected}")]
    DimensionMismatch { row: usize, expected: usize, found: usize },
    #[error("embeddings have mixed dimensions ({0} and {1})")]
    MixedDimensions(usize, usize),
    #[error("duplicate source id '{0}'")]
    DuplicateId(String),
    #[error("invalid embedding '{id}': {source}")]
    InvalidRow { id: String, source: MathError },
}

fn parse_err(msg: impl Into<String>) -> EmbeddingFileError {
    EmbeddingFileError::Parse(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FileFormat {
    #[default]
    Binary,
    JsonLines,
}

impl std::str::FromStr for FileFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" | "bin" => Ok(FileFormat::Binary),
            "jsonl" | "json-lines" => Ok(FileFormat::JsonLines),
            other => Err(format!("unknown embedding file format '{other}'")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonHeader {
    format: String,
    version: u32,
    dimension: usize,
    count: u64,
}

/// A validated set of embeddings sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    dimension: usize,
    rows: Vec<Embedding>,
}

impl EmbeddingFile {
    /// Validates that every row has `dimension` values and ids are unique.
    pub fn new(dimension: usize, rows: Vec<Embedding>) -> Result<Self, EmbeddingFileError> {
        if dimension == 0 && !rows.is_empty() {
            return Err(parse_err("dimension 0 with non-empty rows"));
        }
        let mut seen = HashSet::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.dim() != dimension {
                return Err(EmbeddingFileError::DimensionMismatch { row: i, expected: dimension, found: row.dim() });
            }
            if !seen.insert(row.source_id.as_str()) {
                return Err(EmbeddingFileError::DuplicateId(row.source_id.clone()));
            }
        }
        Ok(Self { dimension, rows })
    }

    /// Infers the dimension from the rows; an empty list gets dimension 0.
    pub fn from_rows(rows: Vec<Embedding>) -> Result<Self, EmbeddingFileError> {
        let dimension = rows.first().map_or(0, Embedding::dim);
        if let Some(bad) = rows.iter().find(|r| r.dim() != dimension) {
            return Err(EmbeddingFileError::MixedDimensions(dimension, bad.dim()));
        }
        Self::new(dimension, rows)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn rows(&self) -> &[Embedding] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<Embedding> {
        self.rows
    }

    pub fn encode(&self, format: FileFormat) -> Vec<u8> {
        match format {
            FileFormat::Binary => self.encode_binary(),
            FileFormat::JsonLines => self.encode_jsonl(),
        }
    }

    fn encode_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.rows.len() * (self.dimension * 4 + 32));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        for row in &self.rows {
            put_str(&mut out, &row.source_id);
            put_str(&mut out, row.subject.as_deref().unwrap_or(""));
            out.push(row.mask_status.to_byte());
            for v in &row.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn encode_jsonl(&self) -> Vec<u8> {
        let header = JsonHeader {
            format: "MUFM".into(),
            version: FORMAT_VERSION,
            dimension: self.dimension,
            count: self.rows.len() as u64,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for row in &self.rows {
            serde_json::to_writer(&mut out, row).expect("row serializes");
            out.push(b'\n');
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EmbeddingFileError> {
        match bytes.first() {
            Some(b'M') => Self::decode_binary(bytes),
            Some(b'{') => Self::decode_jsonl(bytes),
            Some(_) => Err(parse_err("unrecognized embedding file signature")),
            None => Err(parse_err("empty embedding file")),
        }
    }

    fn decode_binary(bytes: &[u8]) -> Result<Self, EmbeddingFileError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(parse_err("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(parse_err(format!("unsupported version {version}")));
        }
        let dimension = r.u32()? as usize;
        let count = r.u64()?;
        let mut rows = Vec::new();
        for i in 0..count {
            let source_id = r.string()?;
            let subject = r.string()?;
            let tag = r.take(1)?[0];
            let mask = MaskStatus::from_byte(tag).ok_or_else(|| parse_err(format!("row {i}: mask tag {tag}")))?;
            let raw = r.take(dimension * 4)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            rows.push(checked_row(source_id, Some(subject), mask, values)?);
        }
        if r.pos != bytes.len() {
            return Err(parse_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Self::new(dimension, rows)
    }

    fn decode_jsonl(bytes: &[u8]) -> Result<Self, EmbeddingFileError> {
        let text = std::str::from_utf8(bytes).map_err(|e| parse_err(e.to_string()))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| parse_err("missing header"))?;
        let header: JsonHeader = serde_json::from_str(first).map_err(|e| parse_err(format!("header: {e}")))?;
        if header.format != "MUFM" || header.version != FORMAT_VERSION {
            return Err(parse_err(format!("unsupported header {}/{}", header.format, header.version)));
        }
        let mut rows = Vec::new();
        for (line_no, line) in lines {
            let row: Embedding =
                serde_json::from_str(line).map_err(|e| parse_err(format!("line {}: {e}", line_no + 1)))?;
            if row.dim() != header.dimension {
                return Err(EmbeddingFileError::DimensionMismatch {
                    row: rows.len(),
                    expected: header.dimension,
                    found: row.dim(),
                });
            }
            rows.push(checked_row(row.source_id, row.subject, row.mask_status, row.values)?);
        }
        if rows.len() as u64 != header.count {
            return Err(parse_err(format!("header declares {} rows, found {}", header.count, rows.len())));
        }
        Self::new(header.dimension, rows)
    }

    pub fn read(path: &Path) -> Result<Self, EmbeddingFileError> {
        Self::decode(&fs::read(path)?)
    }

    /// Writes atomically (temp file + rename).
    pub fn write(&self, path: &Path, format: FileFormat) -> Result<(), EmbeddingFileError> {
        atomic_write(path, &self.encode(format))?;
        Ok(())
    }
}

fn checked_row(
    source_id: String,
    subject: Option<String>,
    mask: MaskStatus,
    values: Vec<f32>,
) -> Result<Embedding, EmbeddingFileError> {
    Embedding::new(source_id.clone(), subject, mask, values)
        .map_err(|source| EmbeddingFileError::InvalidRow { id: source_id, source })
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbeddingFileError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| parse_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EmbeddingFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EmbeddingFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, EmbeddingFileError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| parse_err(e.to_string()))
    }
}

/// Loads every embedding from a binary or JSON-lines file.
pub fn load_precomputed(path: &Path) -> Result<Vec<Embedding>, EmbeddingFileError> {
    Ok(EmbeddingFile::read(path)?.into_rows())
}

/// Saves embeddings in the binary layout. All rows must share a dimension.
pub fn save_embeddings(embeddings: &[Embedding], path: &Path) -> Result<(), EmbeddingFileError> {
    EmbeddingFile::from_rows(embeddings.to_vec())?.write(path, FileFormat::Binary)
}
