//! Resampling and geometric augmentation.
//!
//! All sampling is bilinear over pixel centres. Coordinates that fall
//! outside the source are clamped to the nearest edge pixel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ImagingError, PixelImage};

/// A single geometric augmentation. Rotation, zoom and shift act about the
/// image centre and keep the output dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    FlipHorizontal,
    /// Counter-clockwise rotation as seen on screen, in degrees.
    Rotate(f64),
    /// Scale factor; values above 1 zoom in.
    Zoom(f64),
    /// Translation of the content in pixels (+x right, +y down).
    Shift { dx: f64, dy: f64 },
}

/// Sampling ranges for random augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub max_rotation_deg: f64,
    pub zoom: (f64, f64),
    /// Maximum shift as a fraction of the side length.
    pub max_shift_frac: f64,
    pub flip_probability: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self { max_rotation_deg: 15.0, zoom: (0.9, 1.1), max_shift_frac: 0.1, flip_probability: 0.5 }
    }
}

impl AugmentRanges {
    /// Draws one random transform chain: an optional flip followed by a
    /// rotation, a zoom and a shift.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, width: u32, height: u32) -> Vec<Transform> {
        let mut chain = Vec::with_capacity(4);
        if rng.random_bool(self.flip_probability.clamp(0.0, 1.0)) {
            chain.push(Transform::FlipHorizontal);
        }
        let r = self.max_rotation_deg.abs();
        chain.push(Transform::Rotate(rng.random_range(-r..=r)));
        chain.push(Transform::Zoom(rng.random_range(self.zoom.0..=self.zoom.1)));
        let (mx, my) = (self.max_shift_frac * f64::from(width), self.max_shift_frac * f64::from(height));
        chain.push(Transform::Shift { dx: rng.random_range(-mx..=mx), dy: rng.random_range(-my..=my) });
        chain
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear sample of channel `c` at fractional source position (sx, sy).
fn sample(img: &PixelImage, sx: f64, sy: f64, c: usize) -> f64 {
    let (w, h) = (img.width as usize, img.height as usize);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
    let p = |x, y| f64::from(img.data[img.index(x, y, c)]);
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize to a `target x target` square.
pub fn resize(img: &PixelImage, target: u32) -> PixelImage {
    resize_to(img, target, target)
}

pub(crate) fn resize_to(img: &PixelImage, width: u32, height: u32) -> PixelImage {
    if (img.width, img.height) == (width, height) {
        return img.clone();
    }
    let sx_scale = f64::from(img.width) / f64::from(width);
    let sy_scale = f64::from(img.height) / f64::from(height);
    let c = img.channels as usize;
    let mut data = Vec::with_capacity(width as usize * height as usize * c);
    for y in 0..height {
        let sy = (f64::from(y) + 0.5) * sy_scale - 0.5;
        for x in 0..width {
            let sx = (f64::from(x) + 0.5) * sx_scale - 0.5;
            data.extend((0..c).map(|ch| to_u8(sample(img, sx, sy, ch))));
        }
    }
    PixelImage { width, height, channels: img.channels, data }
}

/// Applies one geometric transform, keeping the output size.
pub fn augment(img: &PixelImage, transform: Transform) -> Result<PixelImage, ImagingError> {
    let (w, h) = (img.width as usize, img.height as usize);
    let c = img.channels as usize;
    if transform == Transform::FlipHorizontal {
        let mut data = Vec::with_capacity(img.data.len());
        for y in 0..h {
            for x in (0..w).rev() {
                let i = img.index(x, y, 0);
                data.extend_from_slice(&img.data[i..i + c]);
            }
        }
        return PixelImage::new(img.width, img.height, img.channels, data);
    }

    // Inverse mapping: for each output pixel find its source position.
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let inverse: Box<dyn Fn(f64, f64) -> (f64, f64)> = match transform {
        Transform::FlipHorizontal => unreachable!(),
        Transform::Rotate(deg) => {
            if !deg.is_finite() {
                return Err(ImagingError::InvalidParameter(format!("rotation {deg}")));
            }
            let (sin, cos) = deg.to_radians().sin_cos();
            Box::new(move |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                (dx * cos - dy * sin + cx, dx * sin + dy * cos + cy)
            })
        }
        Transform::Zoom(f) => {
            if !(f.is_finite() && f > 0.0) {
                return Err(ImagingError::InvalidParameter(format!("zoom factor {f}")));
            }
            Box::new(move |x, y| ((x - cx) / f + cx, (y - cy) / f + cy))
        }
        Transform::Shift { dx, dy } => {
            if !(dx.is_finite() && dy.is_finite()) {
                return Err(ImagingError::InvalidParameter(format!("shift ({dx}, {dy})")));
            }
            Box::new(move |x, y| (x - dx, y - dy))
        }
    };

    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inverse(x as f64, y as f64);
            data.extend((0..c).map(|ch| to_u8(sample(img, sx, sy, ch))));
        }
    }
    PixelImage::new(img.width, img.height, img.channels, data)
}

/// Places two images next to each other, both resized to `height` rows
/// (keeping aspect) and promoted to RGB.
pub fn side_by_side(left: &PixelImage, right: &PixelImage, height: u32) -> PixelImage {
    let fit = |img: &PixelImage| {
        let w = ((f64::from(img.width) * f64::from(height) / f64::from(img.height)).round() as u32).max(1);
        let img = resize_to(img, w, height);
        if img.channels == 1 {
            let data = img.data.iter().flat_map(|&v| [v, v, v]).collect();
            PixelImage { channels: 3, data, ..img }
        } else {
            img
        }
    };
    let (l, r) = (fit(left), fit(right));
    let width = l.width + r.width;
    let mut data = Vec::with_capacity(width as usize * height as usize * 3);
    for y in 0..height as usize {
        for img in [&l, &r] {
            let start = img.index(0, y, 0);
            data.extend_from_slice(&img.data[start..start + img.width as usize * 3]);
        }
    }
    PixelImage { width, height, channels: 3, data }
}
