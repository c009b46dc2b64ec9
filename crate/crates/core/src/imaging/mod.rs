//! Image decoding and conditioning.
//!
//! Everything here works on 8-bit interleaved pixel buffers ([`PixelImage`])
//! until the final [`normalize`] step turns them into a real-valued
//! [`Tensor3`] ready for the feature extractor.

mod filter;
mod geometry;

use std::io::Cursor;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::MaskStatus;

pub use filter::{gaussian_denoise, gaussian_kernel};
pub use geometry::{augment, resize, side_by_side, AugmentRanges, Transform};

/// Side length the VGG-16 backbone expects.
pub const DEFAULT_TARGET_SIZE: u32 = 224;
pub const MIN_TARGET_SIZE: u32 = 8;
/// Denoise strength used when denoising is requested without a sigma.
pub const DEFAULT_DENOISE_SIGMA: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum ImagingError {
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image stream: {0}")]
    CorruptStream(String),
    #[error("expected a 3-channel image, got {0} channel(s)")]
    NotColor(u8),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("encoding failed: {0}")]
    Encode(String),
}

/// Interleaved 8-bit pixels, row-major, 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelImage {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl PixelImage {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidImage(format!("empty dimensions {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(ImagingError::InvalidImage(format!("{channels} channels, expected 1 or 3")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(ImagingError::InvalidImage(format!(
                "buffer holds {} bytes, {width}x{height}x{channels} needs {expected}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    /// An image filled with one pixel value.
    pub fn filled(width: u32, height: u32, pixel: &[u8]) -> Result<Self, ImagingError> {
        let data = pixel.iter().copied().cycle().take(width as usize * height as usize * pixel.len()).collect();
        Self::new(width, height, pixel.len() as u8, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    /// The channel values of the pixel at column `x`, row `y`.
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    pub(crate) fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width as usize + x) * self.channels as usize + c
    }
}

/// A decoded face image together with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub subject: String,
    pub mask_status: MaskStatus,
    pub image: PixelImage,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        subject: impl Into<String>,
        mask_status: MaskStatus,
        image: PixelImage,
    ) -> Result<Self, ImagingError> {
        let (id, subject) = (id.into(), subject.into());
        if id.is_empty() || subject.is_empty() {
            return Err(ImagingError::InvalidImage("record id and subject must be non-empty".into()));
        }
        if mask_status == MaskStatus::Unknown {
            return Err(ImagingError::InvalidImage(format!("record {id} has unknown mask status")));
        }
        Ok(Self { id, subject, mask_status, image })
    }
}

/// Real-valued `height x width x channels` tensor, row-major with channels
/// innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl Tensor3 {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self, ImagingError> {
        if values.len() != height * width * channels {
            return Err(ImagingError::InvalidImage(format!(
                "tensor of dims ({height},{width},{channels}) given {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ImagingError::InvalidImage("tensor contains non-finite values".into()));
        }
        Ok(Self { height, width, channels, values })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, values: vec![value; height * width * channels] }
    }

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.values[(h * self.width + w) * self.channels + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizeRange {
    pub lower: f64,
    pub upper: f64,
}

impl NormalizeRange {
    pub fn new(lower: f64, upper: f64) -> Result<Self, ImagingError> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(ImagingError::InvalidParameter(format!("range [{lower}, {upper}] is not increasing")));
        }
        Ok(Self { lower, upper })
    }
}

impl Default for NormalizeRange {
    fn default() -> Self {
        Self { lower: 0.0, upper: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_size: u32,
    pub normalize_range: NormalizeRange,
    pub to_grayscale: bool,
    /// Gaussian std-dev in pixels; 0 disables denoising.
    pub denoise_sigma: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: DEFAULT_TARGET_SIZE,
            normalize_range: NormalizeRange::default(),
            to_grayscale: false,
            denoise_sigma: 0.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), ImagingError> {
        if self.target_size < MIN_TARGET_SIZE {
            return Err(ImagingError::InvalidParameter(format!(
                "target size {} is below {MIN_TARGET_SIZE}",
                self.target_size
            )));
        }
        NormalizeRange::new(self.normalize_range.lower, self.normalize_range.upper)?;
        if !(self.denoise_sigma.is_finite() && self.denoise_sigma >= 0.0) {
            return Err(ImagingError::InvalidParameter(format!("denoise sigma {}", self.denoise_sigma)));
        }
        Ok(())
    }
}

/// Decodes a PNG, JPEG or BMP stream into 1- or 3-channel pixels.
///
/// Alpha is dropped; grayscale sources stay single-channel.
pub fn decode_image(bytes: &[u8]) -> Result<PixelImage, ImagingError> {
    let format = image::guess_format(bytes)
        .map_err(|_| ImagingError::UnsupportedFormat("unrecognized stream signature".into()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg | ImageFormat::Bmp) {
        return Err(ImagingError::UnsupportedFormat(format!("{format:?}")));
    }
    let decoded = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| ImagingError::CorruptStream(e.to_string()))?;
    from_dynamic(decoded)
}

fn from_dynamic(img: DynamicImage) -> Result<PixelImage, ImagingError> {
    let (w, h) = (img.width(), img.height());
    if img.color().has_color() {
        PixelImage::new(w, h, 3, img.into_rgb8().into_raw())
    } else {
        PixelImage::new(w, h, 1, img.into_luma8().into_raw())
    }
}

/// Encodes pixels as PNG.
pub fn encode_png(img: &PixelImage) -> Result<Vec<u8>, ImagingError> {
    use image::{codecs::png::PngEncoder, ExtendedColorType, ImageEncoder};

    let color = if img.channels == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
    let mut out = Cursor::new(Vec::new());
    PngEncoder::new(&mut out)
        .write_image(&img.data, img.width, img.height, color)
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Maps 8-bit values linearly onto `range`: `v -> lower + v/255 * (upper - lower)`.
pub fn normalize(img: &PixelImage, range: NormalizeRange) -> Tensor3 {
    let span = range.upper - range.lower;
    let values = img
        .data
        .iter()
        .map(|&v| (range.lower + f64::from(v) / 255.0 * span).clamp(range.lower, range.upper))
        .collect();
    Tensor3 {
        height: img.height as usize,
        width: img.width as usize,
        channels: img.channels as usize,
        values,
    }
}

/// ITU-R BT.601 luma, rounded to the nearest level.
pub fn to_grayscale(img: &PixelImage) -> Result<PixelImage, ImagingError> {
    if img.channels != 3 {
        return Err(ImagingError::NotColor(img.channels));
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| {
            let y = 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]);
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    PixelImage::new(img.width, img.height, 1, data)
}

fn replicate_gray(t: Tensor3) -> Tensor3 {
    debug_assert_eq!(t.channels, 1);
    let values = t.values.iter().flat_map(|&v| [v, v, v]).collect();
    Tensor3 { channels: 3, values, ..t }
}

/// Full conditioning pipeline: optional grayscale, resize to
/// `target_size`, optional Gaussian denoise, then normalization.
///
/// The result always has three channels; single-channel data is
/// replicated so it can feed an RGB backbone.
pub fn preprocess(rec: &ImageRecord, cfg: &PreprocessConfig) -> Result<Tensor3, ImagingError> {
    cfg.validate()?;
    let mut img = if cfg.to_grayscale && rec.image.channels == 3 {
        to_grayscale(&rec.image)?
    } else {
        rec.image.clone()
    };
    img = resize(&img, cfg.target_size);
    if cfg.denoise_sigma > 0.0 {
        img = gaussian_denoise(&img, cfg.denoise_sigma)?;
    }
    let t = normalize(&img, cfg.normalize_range);
    Ok(if t.channels == 1 { replicate_gray(t) } else { t })
}
