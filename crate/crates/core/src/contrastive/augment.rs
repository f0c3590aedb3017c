use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;

/// Float RGB image, values in [0, 1], row-major `h × w × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        Self {
            height,
            width,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    /// Downsamples a square `size × size` RGB patch to `out × out`.
    ///
    /// Area averaging when `out` divides `size`, nearest neighbor otherwise.
    pub fn from_patch(size: usize, bytes: &[u8], out: usize) -> Self {
        if out == size {
            return Self::from_bytes(size, size, bytes);
        }
        let mut data = vec![0.0; out * out * 3];
        if size % out == 0 {
            let f = size / out;
            let norm = (f * f) as f64 * 255.0;
            for y in 0..size {
                for x in 0..size {
                    let dst = ((y / f) * out + x / f) * 3;
                    let src = (y * size + x) * 3;
                    for c in 0..3 {
                        data[dst + c] += bytes[src + c] as f64;
                    }
                }
            }
            data.iter_mut().for_each(|v| *v /= norm);
        } else {
            for y in 0..out {
                for x in 0..out {
                    let (sy, sx) = (y * size / out, x * size / out);
                    for c in 0..3 {
                        data[(y * out + x) * 3 + c] = bytes[(sy * size + sx) * 3 + c] as f64 / 255.0;
                    }
                }
            }
        }
        Self {
            height: out,
            width: out,
            data,
        }
    }

    fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Channel-first copy, `[3, h, w]`.
    pub fn to_chw(&self) -> Vec<f64> {
        let area = self.height * self.width;
        let mut out = vec![0.0; 3 * area];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * area + i] = px[c];
            }
        }
        out
    }

    pub fn mean_abs_diff(&self, other: &RgbImage) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64
    }
}

/// Random crop-resize, color jitter and Gaussian blur.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Crop area as a fraction of the image.
    pub crop_scale: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_probability: f64,
    pub blur_sigma: (f64, f64),
    /// Odd kernel width.
    pub blur_kernel: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.5, 1.0),
            brightness: 0.3,
            contrast: 0.3,
            saturation: 0.3,
            blur_probability: 0.5,
            blur_sigma: (0.1, 1.5),
            blur_kernel: 5,
        }
    }
}

impl AugmentationConfig {
    /// Every transform collapsed to a no-op.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            blur_probability: 0.0,
            blur_sigma: (0.0, 0.0),
            blur_kernel: 1,
        }
    }
}

fn uniform(rng: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn crop_resize(img: &RgbImage, scale: f64, rng: &mut rng::Rng) -> RgbImage {
    let side_y = ((img.height as f64) * scale.sqrt()).round().clamp(1.0, img.height as f64) as usize;
    let side_x = ((img.width as f64) * scale.sqrt()).round().clamp(1.0, img.width as f64) as usize;
    if side_y == img.height && side_x == img.width {
        return img.clone();
    }
    let y0 = rng.random_range(0..=img.height - side_y);
    let x0 = rng.random_range(0..=img.width - side_x);
    let (sy, sx) = (side_y as f64 / img.height as f64, side_x as f64 / img.width as f64);
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (side_y - 1) as f64);
        let (y1, wy) = (fy.floor() as usize, fy - fy.floor());
        let y2 = (y1 + 1).min(side_y - 1);
        for x in 0..img.width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (side_x - 1) as f64);
            let (x1, wx) = (fx.floor() as usize, fx - fx.floor());
            let x2 = (x1 + 1).min(side_x - 1);
            for c in 0..3 {
                let v = |yy: usize, xx: usize| img.at(y0 + yy, x0 + xx, c);
                let top = v(y1, x1) * (1.0 - wx) + v(y1, x2) * wx;
                let bot = v(y2, x1) * (1.0 - wx) + v(y2, x2) * wx;
                data.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    RgbImage {
        height: img.height,
        width: img.width,
        data,
    }
}

fn gray(px: &[f64]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn color_jitter(img: &mut RgbImage, cfg: &AugmentationConfig, rng: &mut rng::Rng) {
    let b = uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness);
    let c = uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast);
    let s = uniform(rng, 1.0 - cfg.saturation, 1.0 + cfg.saturation);
    if b != 1.0 {
        img.data.iter_mut().for_each(|v| *v *= b);
    }
    if c != 1.0 {
        let mean = img.data.chunks_exact(3).map(gray).sum::<f64>() / (img.height * img.width) as f64;
        img.data.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
    }
    if s != 1.0 {
        for px in img.data.chunks_exact_mut(3) {
            let g = gray(px);
            px.iter_mut().for_each(|v| *v = g + (*v - g) * s);
        }
    }
}

fn gaussian_blur(img: &RgbImage, sigma: f64, kernel: usize) -> RgbImage {
    let half = (kernel / 2) as isize;
    let weights: Vec<f64> = (-half..=half).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let (h, w) = (img.height as isize, img.width as isize);
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (k, wt) in (-half..=half).zip(&weights) {
                        let (yy, xx) = if horizontal {
                            (y, (x + k).clamp(0, w - 1))
                        } else {
                            ((y + k).clamp(0, h - 1), x)
                        };
                        acc += wt * src[((yy * w + xx) * 3 + c as isize) as usize];
                    }
                    out[((y * w + x) * 3 + c as isize) as usize] = acc;
                }
            }
        }
        out
    };
    let tmp = pass(&img.data, true);
    RgbImage {
        height: img.height,
        width: img.width,
        data: pass(&tmp, false),
    }
}

fn augment_one(img: &RgbImage, cfg: &AugmentationConfig, rng: &mut rng::Rng) -> RgbImage {
    let scale = uniform(rng, cfg.crop_scale.0, cfg.crop_scale.1);
    let mut out = crop_resize(img, scale, rng);
    color_jitter(&mut out, cfg, rng);
    if cfg.blur_probability > 0.0 && cfg.blur_kernel > 1 && rng.random::<f64>() < cfg.blur_probability {
        let sigma = uniform(rng, cfg.blur_sigma.0, cfg.blur_sigma.1).max(1e-3);
        out = gaussian_blur(&out, sigma, cfg.blur_kernel);
    }
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// Two independently augmented views of one patch.
pub fn augment_pair(patch: &RgbImage, cfg: &AugmentationConfig, seed: u64) -> (RgbImage, RgbImage) {
    let mut a = rng::stream(seed, 0);
    let mut b = rng::stream(seed, 1);
    (augment_one(patch, cfg, &mut a), augment_one(patch, cfg, &mut b))
}
