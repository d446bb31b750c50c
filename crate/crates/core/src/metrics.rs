//! Image-quality metrics: PSNR and SSIM over masked float images.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("image too small for SSIM ({0}x{1}, need 11x11)")]
    TooSmall(usize, usize),
}

/// PSNR returned for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// 3-channel float image in `[0, 1]` with an optional validity mask
/// (`true` = pixel participates).
#[derive(Clone, Debug)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub mask: Option<Vec<bool>>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * width * height);
        ImageBuffer {
            width,
            height,
            data: data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            mask: None,
        }
    }

    pub fn from_rgb(img: &crate::imgio::RgbImage) -> Self {
        ImageBuffer::new(img.width, img.height, img.data.clone())
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.width * self.height);
        self.mask = Some(mask);
        self
    }

    fn valid(&self, x: usize, y: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[y * self.width + x])
    }

    fn channel(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[3 * (y * self.width + x) + c] as f64
    }
}

fn check_shapes(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), MetricsError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricsError::ShapeMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over valid pixels, capped at [`PSNR_CAP`] dB.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let mut sq = 0.0f64;
    let mut n = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            if !a.valid(x, y) || !b.valid(x, y) {
                continue;
            }
            for c in 0..3 {
                let d = a.channel(x, y, c) - b.channel(x, y, c);
                sq += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return Ok(PSNR_CAP);
    }
    let mse = sq / n as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1; channels averaged. Windows touching
/// invalid pixels are skipped.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(MetricsError::TooSmall(a.width, a.height));
    }
    let kernel = gaussian_kernel();
    let half = SSIM_WINDOW / 2;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for cy in half..a.height - half {
        'windows: for cx in half..a.width - half {
            // window validity
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let (x, y) = (cx + wx - half, cy + wy - half);
                    if !a.valid(x, y) || !b.valid(x, y) {
                        continue 'windows;
                    }
                }
            }
            for c in 0..3 {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let w = kernel[wy] * kernel[wx];
                        let va = a.channel(cx + wx - half, cy + wy - half, c);
                        let vb = b.channel(cx + wx - half, cy + wy - half, c);
                        mu_a += w * va;
                        mu_b += w * vb;
                        aa += w * va * va;
                        bb += w * vb * vb;
                        ab += w * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                acc += s;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(1.0);
    }
    Ok((acc / count as f64).clamp(-1.0, 1.0))
}
