use super::{ImagingError, PixelImage};

/// Normalized 1-D Gaussian kernel of radius `ceil(3 * sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Mirror an out-of-range index back into `0..n` (edge sample repeated).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_denoise(img: &PixelImage, sigma: f64) -> Result<PixelImage, ImagingError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(ImagingError::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (w, h, c) = (img.width as usize, img.height as usize, img.channels as usize);

    let mut horizontal = vec![0.0f64; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, weight) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + k as isize - radius, w);
                    acc += weight * f64::from(img.data[img.index(sx, y, ch)]);
                }
                horizontal[img.index(x, y, ch)] = acc;
            }
        }
    }

    let mut data = vec![0u8; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, weight) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + k as isize - radius, h);
                    acc += weight * horizontal[img.index(x, sy, ch)];
                }
                data[img.index(x, y, ch)] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    PixelImage::new(img.width, img.height, img.channels, data)
}
