//! No-reference sharpness: the SNR between a Gaussian-blurred image (signal)
//! and its high-pass residual (noise), in dB.

use std::path::Path;

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rec.709 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Single-channel image, row-major, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation("image dimensions must be positive".into()));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Validation(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let pixels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Luma plane of a decoded image (8- or 16-bit, gray or color).
    pub fn from_dynamic(img: &DynamicImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = if img.color().has_color() {
            img.to_rgb32f()
                .pixels()
                .map(|p| {
                    let y = LUMA_WEIGHTS[0] * p[0] as f64
                        + LUMA_WEIGHTS[1] * p[1] as f64
                        + LUMA_WEIGHTS[2] * p[2] as f64;
                    y.clamp(0.0, 1.0)
                })
                .collect()
        } else {
            img.to_luma32f().pixels().map(|p| (p[0] as f64).clamp(0.0, 1.0)).collect()
        };
        Self::new(w, h, pixels)
    }

    pub fn open(path: &Path) -> Result<Self> {
        Self::from_dynamic(&image::open(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LsnrConfig {
    pub sigma: f64,
    pub kernel_radius: usize,
    pub snr_db_ceiling: f64,
}

impl Default for LsnrConfig {
    fn default() -> Self {
        Self { sigma: 1.0, kernel_radius: 3, snr_db_ceiling: 30.0 }
    }
}

impl LsnrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Validation("sigma must be positive".into()));
        }
        if (self.kernel_radius as f64) < (3.0 * self.sigma).ceil() {
            return Err(Error::Validation(format!(
                "kernel_radius {} is below ceil(3 * sigma) = {}",
                self.kernel_radius,
                (3.0 * self.sigma).ceil()
            )));
        }
        if !(self.snr_db_ceiling > 0.0) {
            return Err(Error::Validation("snr_db_ceiling must be positive".into()));
        }
        Ok(())
    }
}

/// Samples of `exp(-x^2 / (2 sigma^2))` at `-radius..=radius`, normalized to unit sum.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

/// Half-sample symmetric reflection: `-1 -> 0`, `n -> n - 1`, periodic in `2n`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

// Each tap is applied as `x[i] + sum_j k_j (x[i+j] - x[i])`, which equals the
// plain weighted sum for a unit-sum kernel and keeps flat regions bit-exact.
fn convolve_line(src: &[f64], stride: usize, len: usize, kernel: &[f64], out: &mut [f64]) {
    let r = (kernel.len() / 2) as isize;
    for i in 0..len {
        let center = src[i * stride];
        let mut acc = 0.0;
        for (k, &w) in kernel.iter().enumerate() {
            let j = reflect(i as isize + k as isize - r, len);
            acc += w * (src[j * stride] - center);
        }
        out[i * stride] = center + acc;
    }
}

/// Horizontal then vertical pass with mirrored borders.
pub fn convolve_separable(img: &GrayImage, kernel: &[f64]) -> GrayImage {
    assert!(kernel.len() % 2 == 1, "kernel length must be odd");
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = y * w;
        convolve_line(&img.pixels[row..row + w], 1, w, kernel, &mut tmp[row..row + w]);
    }
    let mut out = vec![0.0; w * h];
    for x in 0..w {
        convolve_line(&tmp[x..], w, h, kernel, &mut out[x..]);
    }
    // Convex combinations of [0, 1] values stay in range up to rounding.
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    GrayImage { width: w, height: h, pixels: out }
}

/// `10 log10(sum B^2 / sum R^2)` with `B = G * I`, `R = I - B`;
/// `+inf` when the residual vanishes.
pub fn l_snr_db(img: &GrayImage, cfg: &LsnrConfig) -> f64 {
    let kernel = gaussian_kernel(cfg.sigma, cfg.kernel_radius);
    let blurred = convolve_separable(img, &kernel);
    let mut signal = 0.0;
    let mut noise = 0.0;
    for (&x, &b) in img.pixels.iter().zip(&blurred.pixels) {
        signal += b * b;
        let r = x - b;
        noise += r * r;
    }
    if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / noise).log10()
    }
}

/// Linear map of the dB value onto `[0, 1]` against `snr_db_ceiling`.
pub fn l_snr_score(img: &GrayImage, cfg: &LsnrConfig) -> f64 {
    db_to_score(l_snr_db(img, cfg), cfg.snr_db_ceiling)
}

pub fn db_to_score(db: f64, ceiling: f64) -> f64 {
    if db == f64::INFINITY {
        1.0
    } else {
        (db / ceiling).clamp(0.0, 1.0)
    }
}
