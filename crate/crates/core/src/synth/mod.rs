//! Synthetic slides with class-dependent textures, tiling and background filtering.

mod dataset;
mod slide;
mod tiles;

pub use dataset::{DatasetManifest, SlideEntry, Split};
pub use slide::{generate_slide, luminance, Slide, SynthConfig, NUM_CLASSES};
pub use tiles::{filter_background, reassemble, stride_for, tile_slide, window_starts, Patch, TileSet};
