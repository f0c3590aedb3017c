use super::slide::{luminance, Slide};
use crate::error::{GtpError, Result};

/// One P×P×3 tile cut from a slide.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Grid position (row, col).
    pub coord: (usize, usize),
    /// Top-left pixel position (y, x).
    pub origin: (usize, usize),
    pub pixels: Vec<u8>,
    pub tissue_fraction: f64,
}

/// Patches of one slide laid out on a row-major grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TileSet {
    pub patch_size: usize,
    pub stride: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Patches used downstream, in row-major grid order.
    pub patches: Vec<Patch>,
    /// Patches removed by the background filter.
    pub discarded: Vec<Patch>,
    /// Per grid cell (row-major): is the patch in `patches`?
    pub kept_mask: Vec<bool>,
}

impl TileSet {
    pub fn coords(&self) -> Vec<(usize, usize)> {
        self.patches.iter().map(|p| p.coord).collect()
    }
}

/// Window start positions along one axis.
pub fn window_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    if patch > extent || stride == 0 {
        return Vec::new();
    }
    (0..=(extent - patch) / stride).map(|i| i * stride).collect()
}

/// Stride for a given overlap: `floor(P · (1 − overlap))`.
pub fn stride_for(patch_size: usize, overlap_fraction: f64) -> usize {
    ((patch_size as f64) * (1.0 - overlap_fraction)).floor().max(1.0) as usize
}

/// Cuts the slide into a row-major grid of `patch_size` windows.
pub fn tile_slide(slide: &Slide, patch_size: usize, overlap_fraction: f64, background_luminance: f64) -> Result<TileSet> {
    if patch_size == 0 || patch_size > slide.height || patch_size > slide.width {
        return Err(GtpError::invalid(format!(
            "patch size {patch_size} larger than slide {}x{}",
            slide.height, slide.width
        )));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(GtpError::invalid(format!("overlap {overlap_fraction} outside [0, 1)")));
    }
    if overlap_fraction == 0.0 && (slide.height % patch_size != 0 || slide.width % patch_size != 0) {
        return Err(GtpError::invalid(format!(
            "patch size {patch_size} does not divide slide {}x{}",
            slide.height, slide.width
        )));
    }
    let stride = stride_for(patch_size, overlap_fraction);
    let ys = window_starts(slide.height, patch_size, stride);
    let xs = window_starts(slide.width, patch_size, stride);

    let mut patches = Vec::with_capacity(ys.len() * xs.len());
    for (r, &y0) in ys.iter().enumerate() {
        for (c, &x0) in xs.iter().enumerate() {
            let mut pixels = Vec::with_capacity(patch_size * patch_size * 3);
            let mut tissue = 0usize;
            for y in y0..y0 + patch_size {
                let row = &slide.pixels[(y * slide.width + x0) * 3..(y * slide.width + x0 + patch_size) * 3];
                for px in row.chunks_exact(3) {
                    if luminance([px[0], px[1], px[2]]) <= background_luminance {
                        tissue += 1;
                    }
                }
                pixels.extend_from_slice(row);
            }
            patches.push(Patch {
                coord: (r, c),
                origin: (y0, x0),
                pixels,
                tissue_fraction: tissue as f64 / (patch_size * patch_size) as f64,
            });
        }
    }
    Ok(TileSet {
        patch_size,
        stride,
        grid_rows: ys.len(),
        grid_cols: xs.len(),
        kept_mask: vec![true; patches.len()],
        patches,
        discarded: Vec::new(),
    })
}

/// Drops patches whose tissue fraction is below `tissue_threshold`.
pub fn filter_background(tiles: TileSet, tissue_threshold: f64) -> Result<TileSet> {
    let TileSet {
        patch_size,
        stride,
        grid_rows,
        grid_cols,
        patches,
        mut discarded,
        mut kept_mask,
    } = tiles;
    let mut kept = Vec::with_capacity(patches.len());
    for p in patches {
        if p.tissue_fraction >= tissue_threshold {
            kept.push(p);
        } else {
            kept_mask[p.coord.0 * grid_cols + p.coord.1] = false;
            discarded.push(p);
        }
    }
    if kept.is_empty() {
        return Err(GtpError::EmptySlide);
    }
    discarded.sort_by_key(|p| p.coord);
    Ok(TileSet {
        patch_size,
        stride,
        grid_rows,
        grid_cols,
        patches: kept,
        discarded,
        kept_mask,
    })
}

/// Pastes every patch (kept and discarded) back into a slide-sized RGB buffer.
pub fn reassemble(tiles: &TileSet, height: usize, width: usize) -> Vec<u8> {
    let p = tiles.patch_size;
    let mut out = vec![0u8; height * width * 3];
    for patch in tiles.patches.iter().chain(&tiles.discarded) {
        let (y0, x0) = patch.origin;
        for dy in 0..p {
            let dst = ((y0 + dy) * width + x0) * 3;
            out[dst..dst + p * 3].copy_from_slice(&patch.pixels[dy * p * 3..(dy + 1) * p * 3]);
        }
    }
    out
}
