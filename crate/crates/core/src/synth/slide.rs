use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{GtpError, Result};
use crate::rng;

pub const NUM_CLASSES: usize = 3;

/// Parameters of the synthetic slide renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub slide_height: usize,
    pub slide_width: usize,
    pub patch_size: usize,
    /// Range the per-slide tumor fraction is drawn from for tumor classes.
    pub tumor_fraction_range: (f64, f64),
    /// Pixels with luminance above this are background.
    pub background_luminance: f64,
    /// Tissue ellipse semi-axes as a fraction of slide extent.
    pub tissue_radius_range: (f64, f64),
    /// Uniform per-channel pixel noise amplitude.
    pub pixel_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            slide_height: 4096,
            slide_width: 4096,
            patch_size: 512,
            tumor_fraction_range: (0.15, 0.4),
            background_luminance: 220.0,
            tissue_radius_range: (0.52, 0.6),
            pixel_noise: 10.0,
        }
    }
}

/// One synthetic whole-slide image with its ground-truth tumor mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Slide {
    pub height: usize,
    pub width: usize,
    /// Row-major RGB, 3 bytes per pixel.
    pub pixels: Vec<u8>,
    pub class_label: usize,
    /// Row-major, true on tumor pixels.
    pub truth_mask: Vec<bool>,
    pub seed: u64,
    pub tumor_fraction: f64,
}

impl Slide {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn mask_count(&self) -> usize {
        self.truth_mask.iter().filter(|&&m| m).count()
    }
}

pub fn luminance(rgb: [u8; 3]) -> f64 {
    0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64
}

/// A sum of oriented cosines; frequencies are in cycles per patch.
#[derive(Debug, Clone)]
struct Texture {
    /// (ky, kx, phase) in radians per pixel.
    waves: Vec<(f64, f64, f64)>,
    base: [f64; 3],
    amp: [f64; 3],
}

impl Texture {
    fn sample(&self, y: usize, x: usize) -> [f64; 3] {
        let mut t = 0.0;
        for &(ky, kx, ph) in &self.waves {
            t += (ky * y as f64 + kx * x as f64 + ph).cos();
        }
        t /= self.waves.len() as f64;
        [
            self.base[0] + self.amp[0] * t,
            self.base[1] + self.amp[1] * t,
            self.base[2] + self.amp[2] * t,
        ]
    }
}

/// Dominant (cycles per patch, orientation in degrees) per tumor class.
const TUMOR_BANDS: [(f64, f64); 2] = [(5.0, 20.0), (9.0, 110.0)];

fn texture_for(class: Option<usize>, patch: usize, rng: &mut rng::Rng) -> Texture {
    let mut waves = Vec::new();
    let to_wave = |cycles: f64, theta: f64, phase: f64| {
        let k = 2.0 * PI * cycles / patch as f64;
        (k * theta.sin(), k * theta.cos(), phase)
    };
    match class {
        None => {
            for _ in 0..3 {
                let cycles = rng.random_range(0.8..2.0);
                let theta = rng.random_range(0.0..PI);
                waves.push(to_wave(cycles, theta, rng.random_range(0.0..2.0 * PI)));
            }
            Texture {
                waves,
                base: [222.0, 158.0, 188.0],
                amp: [18.0, 22.0, 16.0],
            }
        }
        Some(c) => {
            let (cycles, deg) = TUMOR_BANDS[c - 1];
            for _ in 0..3 {
                let f = cycles * rng.random_range(0.9..1.1);
                let theta = (deg + rng.random_range(-10.0..10.0)).to_radians();
                waves.push(to_wave(f, theta, rng.random_range(0.0..2.0 * PI)));
            }
            Texture {
                waves,
                base: [140.0, 80.0, 165.0],
                amp: [55.0, 50.0, 45.0],
            }
        }
    }
}

/// Renders a slide of class `class_label` (0 normal, 1 and 2 tumor).
///
/// Tissue is a wobbly ellipse on a near-white background. The tumor region
/// is a connected set of whole patch cells inside the tissue covering
/// `round(tumor_fraction · cells)` cells; it is empty for class 0.
pub fn generate_slide(
    cfg: &SynthConfig,
    seed: u64,
    class_label: usize,
    height: usize,
    width: usize,
    tumor_fraction: f64,
) -> Result<Slide> {
    let p = cfg.patch_size;
    if class_label >= NUM_CLASSES {
        return Err(GtpError::invalid(format!("class label {class_label} outside 0..{NUM_CLASSES}")));
    }
    if p == 0 || height == 0 || width == 0 || height % p != 0 || width % p != 0 {
        return Err(GtpError::invalid(format!(
            "slide {height}x{width} is not a positive multiple of patch size {p}"
        )));
    }
    if !(0.0..=1.0).contains(&tumor_fraction) || tumor_fraction.is_nan() {
        return Err(GtpError::invalid(format!("tumor fraction {tumor_fraction} outside [0, 1]")));
    }
    let tumor_fraction = if class_label == 0 { 0.0 } else { tumor_fraction };
    let mut rng = rng::stream(seed, 0);

    let (gr, gc) = (height / p, width / p);
    let cy = height as f64 / 2.0 + rng.random_range(-0.03..0.03) * height as f64;
    let cx = width as f64 / 2.0 + rng.random_range(-0.03..0.03) * width as f64;
    let (lo, hi) = cfg.tissue_radius_range;
    let ry = height as f64 * rng.random_range(lo..hi.max(lo + f64::EPSILON));
    let rx = width as f64 * rng.random_range(lo..hi.max(lo + f64::EPSILON));
    let wobble_phase = rng.random_range(0.0..2.0 * PI);
    let in_tissue = |y: usize, x: usize| {
        let dy = (y as f64 + 0.5 - cy) / ry;
        let dx = (x as f64 + 0.5 - cx) / rx;
        let r = (dy * dy + dx * dx).sqrt();
        let theta = dy.atan2(dx);
        r <= 1.0 + 0.05 * (3.0 * theta + wobble_phase).sin()
    };

    // cells entirely inside the tissue are tumor candidates
    let full_tissue: Vec<bool> = (0..gr * gc)
        .map(|cell| {
            let (r0, c0) = ((cell / gc) * p, (cell % gc) * p);
            (r0..r0 + p).all(|y| in_tissue(y, c0) && in_tissue(y, c0 + p - 1))
                && (c0..c0 + p).all(|x| in_tissue(r0, x) && in_tissue(r0 + p - 1, x))
        })
        .collect();

    let target = (tumor_fraction * (gr * gc) as f64).round() as usize;
    let tumor_cells = grow_region(&full_tissue, gr, gc, target, &mut rng)?;

    let stroma = texture_for(None, p, &mut rng);
    let tumor = (class_label > 0).then(|| texture_for(Some(class_label), p, &mut rng));
    let mut noise_rng = rng::stream(seed, 1);

    let mut pixels = vec![0u8; height * width * 3];
    let mut truth_mask = vec![false; height * width];
    for y in 0..height {
        for x in 0..width {
            let cell = (y / p) * gc + x / p;
            let i = y * width + x;
            let rgb = if !in_tissue(y, x) {
                [243.0, 241.0, 244.0]
            } else if tumor_cells.contains(&cell) {
                truth_mask[i] = true;
                tumor.as_ref().expect("tumor texture for tumor class").sample(y, x)
            } else {
                stroma.sample(y, x)
            };
            for ch in 0..3 {
                let n = noise_rng.random_range(-cfg.pixel_noise..=cfg.pixel_noise);
                // background noise is one-sided so it stays near-white
                let v = if in_tissue(y, x) { rgb[ch] + n } else { rgb[ch] + n.abs() * 0.5 - 2.0 };
                pixels[i * 3 + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    Ok(Slide {
        height,
        width,
        pixels,
        class_label,
        truth_mask,
        seed,
        tumor_fraction,
    })
}

/// Seeded growth of a 4-connected region of `target` allowed cells.
fn grow_region(allowed: &[bool], gr: usize, gc: usize, target: usize, rng: &mut rng::Rng) -> Result<BTreeSet<usize>> {
    let mut region = BTreeSet::new();
    if target == 0 {
        return Ok(region);
    }
    let available = allowed.iter().filter(|&&a| a).count();
    if target > available {
        return Err(GtpError::invalid(format!(
            "tumor needs {target} cells but only {available} lie fully inside tissue"
        )));
    }
    let candidates: Vec<usize> = (0..allowed.len()).filter(|&c| allowed[c]).collect();
    region.insert(candidates[rng.random_range(0..candidates.len())]);
    while region.len() < target {
        let frontier: Vec<usize> = region
            .iter()
            .flat_map(|&c| {
                let (r, col) = ((c / gc) as isize, (c % gc) as isize);
                [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .into_iter()
                    .map(move |(dr, dc)| (r + dr, col + dc))
            })
            .filter(|&(r, c)| r >= 0 && c >= 0 && (r as usize) < gr && (c as usize) < gc)
            .map(|(r, c)| r as usize * gc + c as usize)
            .filter(|c| allowed[*c] && !region.contains(c))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if frontier.is_empty() {
            // region boxed in: restart growth from another seed cell
            let rest: Vec<usize> = candidates.iter().copied().filter(|c| !region.contains(c)).collect();
            region.insert(rest[rng.random_range(0..rest.len())]);
        } else {
            region.insert(frontier[rng.random_range(0..frontier.len())]);
        }
    }
    Ok(region)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            patch_size: 64,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn class_zero_has_empty_mask() {
        let cfg = SynthConfig::default();
        let s = generate_slide(&cfg, 1, 0, 1024, 1024, 0.0).unwrap();
        assert_eq!(s.mask_count(), 0);
        // a requested fraction is ignored for normal slides
        let s = generate_slide(&small_cfg(), 1, 0, 256, 256, 0.3).unwrap();
        assert_eq!(s.mask_count(), 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_slide(&cfg, 5, 2, 512, 512, 0.2).unwrap();
        let b = generate_slide(&cfg, 5, 2, 512, 512, 0.2).unwrap();
        assert_eq!(a, b);
        let c = generate_slide(&cfg, 6, 2, 512, 512, 0.2).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn mask_area_tracks_fraction_within_one_patch() {
        let cfg = SynthConfig::default();
        let s = generate_slide(&cfg, 7, 1, 2048, 2048, 0.25).unwrap();
        let want = 0.25 * 2048.0 * 2048.0;
        let quantum = (cfg.patch_size * cfg.patch_size) as f64;
        assert!((s.mask_count() as f64 - want).abs() <= quantum, "{}", s.mask_count());
    }

    #[test]
    fn invalid_arguments_are_rejected() {
        let cfg = small_cfg();
        assert!(generate_slide(&cfg, 1, 1, 100, 128, 0.1).is_err());
        assert!(generate_slide(&cfg, 1, 1, 128, 128, 1.5).is_err());
        assert!(generate_slide(&cfg, 1, 3, 128, 128, 0.1).is_err());
    }

    #[test]
    fn tumor_pixels_are_tissue() {
        let cfg = small_cfg();
        let s = generate_slide(&cfg, 11, 1, 512, 512, 0.3).unwrap();
        for y in 0..s.height {
            for x in 0..s.width {
                if s.truth_mask[y * s.width + x] {
                    assert!(luminance(s.pixel(y, x)) <= cfg.background_luminance);
                }
            }
        }
    }
}
