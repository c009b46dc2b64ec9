//! Turns preprocessed tensors into unit-norm embeddings.
//!
//! Two back ends share one surface: an ONNX backbone executed with tract,
//! or a table of precomputed embeddings looked up by source id. Either way
//! every embedding leaving this module is L2-normalized.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use thiserror::Error;
use tract_onnx::prelude::*;
use tract_onnx::tract_hir::infer::Factoid;
use tract_onnx::tract_hir::internal::DimLike;

use crate::embedding::{global_average_pool, Embedding, MathError, DEFAULT_DIM};
use crate::embedding_file::{load_precomputed, EmbeddingFileError};
use crate::imaging::{ImagingError, Tensor3};
use crate::MaskStatus;

/// Input side length used when the model leaves its spatial dims symbolic.
pub const DEFAULT_INPUT_SIZE: usize = 224;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("failed to load model {path}: {reason}")]
    ModelLoadFailure { path: PathBuf, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("inference failed: {0}")]
    InferenceFailure(String),
    #[error("invalid extractor configuration: {0}")]
    InvalidConfig(String),
    #[error("no precomputed embedding for '{0}'")]
    MissingEmbedding(String),
    #[error(transparent)]
    File(#[from] EmbeddingFileError),
    #[error("cannot normalize model output: {0}")]
    Math(#[from] MathError),
    #[error("image: {0}")]
    Imaging(#[from] ImagingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorMode {
    ModelFile,
    Precomputed,
}

/// Memory layout of the model input (and of a feature-map output).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputLayout {
    /// `(1, H, W, C)`
    #[default]
    Hwc,
    /// `(1, C, H, W)`
    Chw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputKind {
    /// Rank-4 map, pooled here with global average pooling.
    #[default]
    FeatureMap,
    /// `(1, D)` vector, pooled inside the graph already.
    Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub mode: ExtractorMode,
    /// Model file for `ModelFile`, embedding file for `Precomputed`.
    pub model_path: Option<PathBuf>,
    pub input_layout: InputLayout,
    pub output_kind: OutputKind,
    pub expected_dim: usize,
}

impl ExtractorConfig {
    pub fn model(path: impl Into<PathBuf>) -> Self {
        Self {
            mode: ExtractorMode::ModelFile,
            model_path: Some(path.into()),
            input_layout: InputLayout::Hwc,
            output_kind: OutputKind::FeatureMap,
            expected_dim: DEFAULT_DIM,
        }
    }

    pub fn precomputed(path: impl Into<PathBuf>) -> Self {
        Self { mode: ExtractorMode::Precomputed, ..Self::model(path) }
    }

    pub fn validate(&self) -> Result<(), ExtractError> {
        if self.expected_dim == 0 {
            return Err(ExtractError::InvalidConfig("expected_dim must be positive".into()));
        }
        if self.model_path.is_none() {
            return Err(ExtractError::InvalidConfig("a model or embedding file path is required".into()));
        }
        Ok(())
    }
}

type Plan = std::sync::Arc<TypedRunnableModel>;

/// A loaded ONNX backbone. Immutable after load; `extract` may be called
/// from many threads at once since each run gets its own state.
#[derive(Debug, Clone)]
pub struct ModelExtractor {
    plan: Plan,
    /// Expected `(height, width, channels)` of the input tensor.
    input_dims: (usize, usize, usize),
    layout: InputLayout,
    output_kind: OutputKind,
    expected_dim: usize,
}

impl ModelExtractor {
    pub fn load(cfg: &ExtractorConfig) -> Result<Self, ExtractError> {
        cfg.validate()?;
        let path = cfg.model_path.as_deref().expect("validated");
        let fail = |reason: String| ExtractError::ModelLoadFailure { path: path.to_path_buf(), reason };

        let mut model = tract_onnx::onnx().model_for_path(path).map_err(|e| fail(format!("{e:#}")))?;
        if model.input_outlets().map_err(|e| fail(e.to_string()))?.len() != 1 {
            return Err(fail("model must have exactly one input".into()));
        }
        if model.output_outlets().map_err(|e| fail(e.to_string()))?.len() != 1 {
            return Err(fail("model must have exactly one output".into()));
        }

        let declared = model.input_fact(0).map_err(|e| fail(e.to_string()))?.shape.concretize();
        let shape = match declared {
            Some(dims) if dims.iter().all(|d| d.to_usize().is_ok()) => {
                let dims: Vec<usize> = dims.iter().map(|d| d.to_usize().unwrap()).collect();
                if dims.len() != 4 || dims[0] != 1 {
                    return Err(fail(format!("input shape {dims:?} is not (1, _, _, _)")));
                }
                dims
            }
            _ => match cfg.input_layout {
                InputLayout::Hwc => vec![1, DEFAULT_INPUT_SIZE, DEFAULT_INPUT_SIZE, 3],
                InputLayout::Chw => vec![1, 3, DEFAULT_INPUT_SIZE, DEFAULT_INPUT_SIZE],
            },
        };
        let input_dims = match cfg.input_layout {
            InputLayout::Hwc => (shape[1], shape[2], shape[3]),
            InputLayout::Chw => (shape[2], shape[3], shape[1]),
        };
        model = model
            .with_input_fact(0, f32::fact(&shape).into())
            .map_err(|e| fail(format!("{e:#}")))?;
        let plan = model
            .into_optimized()
            .and_then(|m| m.into_runnable())
            .map_err(|e| fail(format!("{e:#}")))?;
        log::info!("loaded model {} with input shape {:?}", path.display(), shape);

        Ok(Self {
            plan,
            input_dims,
            layout: cfg.input_layout,
            output_kind: cfg.output_kind,
            expected_dim: cfg.expected_dim,
        })
    }

    /// `(height, width, channels)` the model accepts.
    pub fn input_dims(&self) -> (usize, usize, usize) {
        self.input_dims
    }

    pub fn expected_dim(&self) -> usize {
        self.expected_dim
    }

    /// Runs the backbone and returns the unit-norm embedding values.
    pub fn extract(&self, tensor: &Tensor3) -> Result<Vec<f32>, ExtractError> {
        if tensor.dims() != self.input_dims {
            return Err(ExtractError::ShapeMismatch(format!(
                "tensor dims {:?}, model expects {:?}",
                tensor.dims(),
                self.input_dims
            )));
        }
        let (h, w, c) = self.input_dims;
        let input: Tensor = match self.layout {
            InputLayout::Hwc => {
                let data: Vec<f32> = tensor.values().iter().map(|&v| v as f32).collect();
                tract_ndarray::Array4::from_shape_vec((1, h, w, c), data)
                    .expect("dims checked")
                    .into()
            }
            InputLayout::Chw => {
                tract_ndarray::Array4::from_shape_fn((1, c, h, w), |(_, ch, y, x)| tensor.get(y, x, ch) as f32).into()
            }
        };
        let outputs = self
            .plan
            .run(tvec!(input.into()))
            .map_err(|e| ExtractError::InferenceFailure(format!("{e:#}")))?;
        let out = outputs[0]
            .to_plain_array_view::<f32>()
            .map_err(|e| ExtractError::InferenceFailure(format!("{e:#}")))?;
        let shape = out.shape().to_vec();

        let pooled: Vec<f64> = match self.output_kind {
            OutputKind::Vector => {
                if shape.len() != 2 || shape[0] != 1 {
                    return Err(ExtractError::ShapeMismatch(format!("vector output has shape {shape:?}")));
                }
                out.iter().map(|&v| f64::from(v)).collect()
            }
            OutputKind::FeatureMap => {
                if shape.len() != 4 || shape[0] != 1 {
                    return Err(ExtractError::ShapeMismatch(format!("feature map has shape {shape:?}")));
                }
                let (mh, mw, mc) = match self.layout {
                    InputLayout::Hwc => (shape[1], shape[2], shape[3]),
                    InputLayout::Chw => (shape[2], shape[3], shape[1]),
                };
                let mut values = Vec::with_capacity(mh * mw * mc);
                for y in 0..mh {
                    for x in 0..mw {
                        for ch in 0..mc {
                            let v = match self.layout {
                                InputLayout::Hwc => out[[0, y, x, ch]],
                                InputLayout::Chw => out[[0, ch, y, x]],
                            };
                            values.push(f64::from(v));
                        }
                    }
                }
                let map = Tensor3::new(mh, mw, mc, values)
                    .map_err(|e| ExtractError::InferenceFailure(e.to_string()))?;
                global_average_pool(&map)
            }
        };
        if pooled.len() != self.expected_dim {
            return Err(ExtractError::ShapeMismatch(format!(
                "model produced {} channels, expected {}",
                pooled.len(),
                self.expected_dim
            )));
        }
        let unit = crate::embedding::l2_normalize(&pooled)?;
        Ok(unit.into_iter().map(|v| v as f32).collect())
    }
}

/// Precomputed embeddings keyed by source id, re-normalized on load.
#[derive(Debug, Clone)]
pub struct PrecomputedTable {
    dimension: usize,
    by_id: HashMap<String, Embedding>,
}

impl PrecomputedTable {
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self, ExtractError> {
        let rows = load_precomputed(path)?;
        let dimension = rows.first().map_or(expected_dim.unwrap_or(0), Embedding::dim);
        if let Some(d) = expected_dim {
            if !rows.is_empty() && d != dimension {
                return Err(ExtractError::ShapeMismatch(format!("file has dimension {dimension}, expected {d}")));
            }
        }
        let mut by_id = HashMap::with_capacity(rows.len());
        for row in rows {
            let unit = Embedding::normalized(row.source_id.clone(), row.subject, row.mask_status, &row.values)?;
            by_id.insert(row.source_id, unit);
        }
        log::info!("loaded {} precomputed embeddings (d={dimension}) from {}", by_id.len(), path.display());
        Ok(Self { dimension, by_id })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn get(&self, source_id: &str) -> Option<&Embedding> {
        self.by_id.get(source_id)
    }
}

/// Either back end behind one interface.
#[derive(Debug, Clone)]
pub enum Extractor {
    Model(ModelExtractor),
    Precomputed(PrecomputedTable),
}

impl Extractor {
    pub fn open(cfg: &ExtractorConfig) -> Result<Self, ExtractError> {
        cfg.validate()?;
        match cfg.mode {
            ExtractorMode::ModelFile => Ok(Extractor::Model(ModelExtractor::load(cfg)?)),
            ExtractorMode::Precomputed => {
                let path = cfg.model_path.as_deref().expect("validated");
                Ok(Extractor::Precomputed(PrecomputedTable::load(path, Some(cfg.expected_dim))?))
            }
        }
    }

    /// Produces the embedding for one image. `tensor` is only evaluated by
    /// the model back end.
    pub fn embed<F>(
        &self,
        source_id: &str,
        subject: Option<String>,
        mask_status: MaskStatus,
        tensor: F,
    ) -> Result<Embedding, ExtractError>
    where
        F: FnOnce() -> Result<Tensor3, ExtractError>,
    {
        match self {
            Extractor::Model(m) => {
                let values = m.extract(&tensor()?)?;
                Ok(Embedding::new(source_id, subject, mask_status, values)?)
            }
            Extractor::Precomputed(t) => {
                let found = t.get(source_id).ok_or_else(|| ExtractError::MissingEmbedding(source_id.into()))?;
                Ok(Embedding::new(source_id, subject, mask_status, found.values.clone())?)
            }
        }
    }
}
