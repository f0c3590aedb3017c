use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::slide::Slide;
use crate::error::{GtpError, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: String,
    pub class_label: usize,
    pub tumor_fraction: f64,
    pub seed: u64,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub image: String,
    pub mask: String,
    pub sidecar: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    seed: u64,
    class: usize,
    tumor_fraction: f64,
}

/// `manifest.json` of a synthetic dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    /// Echo of the run configuration that produced the dataset.
    pub config: serde_json::Value,
    pub slides: Vec<SlideEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    /// Accepts either the dataset directory or the manifest file itself.
    pub fn manifest_path(path: &Path) -> PathBuf {
        if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        }
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let file = Self::manifest_path(path);
        let manifest: Self = io::read_json(&file)?;
        for s in &manifest.slides {
            if s.class_label >= super::NUM_CLASSES {
                return Err(GtpError::validation(&file, format!("slide {} has class {}", s.slide_id, s.class_label)));
            }
        }
        let dir = file.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((manifest, dir))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn find(&self, slide_id: &str) -> Option<&SlideEntry> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }
}

impl SlideEntry {
    pub fn for_slide(slide_id: &str, slide: &Slide, split: Split) -> Self {
        Self {
            slide_id: slide_id.to_string(),
            class_label: slide.class_label,
            tumor_fraction: slide.tumor_fraction,
            seed: slide.seed,
            split,
            height: slide.height,
            width: slide.width,
            image: format!("{slide_id}.png"),
            mask: format!("{slide_id}_mask.pgm"),
            sidecar: format!("{slide_id}.json"),
        }
    }

    /// Writes pixels (PNG), mask (PGM, 255 = tumor) and the JSON sidecar.
    pub fn write_slide(&self, dir: &Path, slide: &Slide) -> Result<()> {
        io::write_png_rgb(&dir.join(&self.image), slide.width, slide.height, &slide.pixels)?;
        let mask: Vec<u8> = slide.truth_mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        io::write_pgm(&dir.join(&self.mask), slide.width, slide.height, &mask)?;
        io::write_json(
            &dir.join(&self.sidecar),
            &Sidecar {
                seed: slide.seed,
                class: slide.class_label,
                tumor_fraction: slide.tumor_fraction,
            },
        )
    }

    pub fn read_slide(&self, dir: &Path) -> Result<Slide> {
        let img_path = dir.join(&self.image);
        let (w, h, pixels) = io::read_png_rgb(&img_path)?;
        if (w, h) != (self.width, self.height) {
            return Err(GtpError::validation(img_path, format!("image is {w}x{h}, manifest says {}x{}", self.width, self.height)));
        }
        let mask_path = dir.join(&self.mask);
        let (mw, mh, mask) = io::read_pgm(&mask_path)?;
        if (mw, mh) != (w, h) {
            return Err(GtpError::validation(mask_path, "mask size differs from image"));
        }
        Ok(Slide {
            height: h,
            width: w,
            pixels,
            class_label: self.class_label,
            truth_mask: mask.into_iter().map(|v| v > 127).collect(),
            seed: self.seed,
            tumor_fraction: self.tumor_fraction,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_slide, SynthConfig};

    #[test]
    fn slide_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            patch_size: 32,
            ..Default::default()
        };
        let slide = generate_slide(&cfg, 9, 2, 128, 128, 0.25).unwrap();
        let entry = SlideEntry::for_slide("s000", &slide, Split::Train);
        entry.write_slide(dir.path(), &slide).unwrap();
        assert_eq!(entry.read_slide(dir.path()).unwrap(), slide);
        let sidecar: serde_json::Value = io::read_json(&dir.path().join("s000.json")).unwrap();
        assert_eq!(sidecar["class"], 2);
    }
}
