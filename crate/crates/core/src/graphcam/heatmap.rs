use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GtpError, Result};
use crate::io;

/// Per-patch relevance on the tiling grid, max-normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub cells: Vec<f64>,
}

/// Places each node's relevance on its grid cell and normalizes by the maximum.
///
/// Cells without a node stay 0, as do negative relevances, which only
/// occur when the positive clamp is disabled.
pub fn reconstruct_heatmap(c_g: &[f64], coords: &[(i32, i32)], grid_rows: usize, grid_cols: usize) -> Result<Heatmap> {
    if c_g.len() != coords.len() {
        return Err(GtpError::invalid(format!(
            "{} relevances for {} coordinates",
            c_g.len(),
            coords.len()
        )));
    }
    let mut cells = vec![0.0; grid_rows * grid_cols];
    for (&v, &(r, c)) in c_g.iter().zip(coords) {
        if r < 0 || c < 0 || r as usize >= grid_rows || c as usize >= grid_cols {
            return Err(GtpError::invalid(format!("coordinate ({r}, {c}) outside {grid_rows}×{grid_cols} grid")));
        }
        cells[r as usize * grid_cols + c as usize] = v.max(0.0);
    }
    let max = cells.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        cells.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Heatmap {
        grid_rows,
        grid_cols,
        cells,
    })
}

impl Heatmap {
    pub fn cell(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.grid_cols + col]
    }

    /// Nearest-neighbor upsampling to slide resolution; each pixel takes the
    /// value of the patch whose stride cell contains it, and pixels past the
    /// last patch are 0.
    pub fn upsample(&self, stride: usize, patch_size: usize, height: usize, width: usize) -> Vec<f64> {
        let cover_y = (self.grid_rows.saturating_sub(1)) * stride + patch_size;
        let cover_x = (self.grid_cols.saturating_sub(1)) * stride + patch_size;
        let mut out = vec![0.0; height * width];
        if self.grid_rows == 0 || self.grid_cols == 0 || stride == 0 {
            return out;
        }
        for y in 0..height.min(cover_y) {
            let r = (y / stride).min(self.grid_rows - 1);
            for x in 0..width.min(cover_x) {
                let c = (x / stride).min(self.grid_cols - 1);
                out[y * width + x] = self.cell(r, c);
            }
        }
        out
    }
}

pub fn to_gray(values: &[f64]) -> Vec<u8> {
    values.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect()
}

/// Blue → cyan → yellow → red ramp.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |center: f64| ((1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Color-mapped heatmap blended over the slide when one is given.
pub fn render_rgb(values: &[f64], slide_rgb: Option<&[u8]>, alpha: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 3);
    for (i, &v) in values.iter().enumerate() {
        let c = colormap(v);
        for k in 0..3 {
            let px = match slide_rgb {
                Some(s) => (alpha * c[k] as f64 + (1.0 - alpha) * s[i * 3 + k] as f64).round() as u8,
                None => c[k],
            };
            out.push(px);
        }
    }
    out
}

/// Thresholds 0.1, 0.2, …, 0.9.
pub fn default_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub thresholds: Vec<f64>,
    pub iou: Vec<f64>,
    pub max_iou: f64,
    pub argmax_threshold: f64,
}

pub fn iou(pred: impl Iterator<Item = bool>, truth: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, &t) in pred.zip(truth) {
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of `heatmap ≥ t` against the truth mask at each threshold.
///
/// Ties for the maximum go to the lowest threshold.
pub fn binarize_and_iou(heatmap: &[f64], truth: &[bool], thresholds: &[f64]) -> Result<IouReport> {
    if heatmap.len() != truth.len() {
        return Err(GtpError::invalid(format!(
            "heatmap has {} pixels, mask has {}",
            heatmap.len(),
            truth.len()
        )));
    }
    if thresholds.is_empty() {
        return Err(GtpError::invalid("no thresholds"));
    }
    let scores: Vec<f64> = thresholds.iter().map(|&t| iou(heatmap.iter().map(|&v| v >= t), truth)).collect();
    let best = (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
    Ok(IouReport {
        thresholds: thresholds.to_vec(),
        max_iou: scores[best],
        argmax_threshold: thresholds[best],
        iou: scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub slide_id: String,
    pub target_class: usize,
    pub class_probability: f64,
    pub max_iou: Option<f64>,
    pub argmax_threshold: Option<f64>,
    /// Echo of the run configuration, including seeds.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Writes `<stem>.pgm`, `<stem>.png` and `<stem>.json` into `dir`.
pub fn write_heatmap(
    dir: &Path,
    stem: &str,
    pixels: &[f64],
    height: usize,
    width: usize,
    slide_rgb: Option<&[u8]>,
    sidecar: &HeatmapSidecar,
) -> Result<()> {
    io::create_dir(dir)?;
    io::write_pgm(&dir.join(format!("{stem}.pgm")), width, height, &to_gray(pixels))?;
    io::write_png_rgb(&dir.join(format!("{stem}.png")), width, height, &render_rgb(pixels, slide_rgb, 0.5))?;
    io::write_json(&dir.join(format!("{stem}.json")), sidecar)
}
