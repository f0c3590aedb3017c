//! Disk stages between the dataset and the classifier: tiles, patch
//! embeddings and graph containers, each with an `index.json`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{embed_patches, load_encoder, prepare_patches, pretrain_encoder, save_encoder, EncoderParams, PretrainLogEntry};
use crate::error::{GtpError, Result};
use crate::graph::{assemble_graph, WsiGraph};
use crate::io;
use crate::numerics::Tensor;
use crate::rng;
use crate::synth::{filter_background, tile_slide, DatasetManifest, Patch, Slide, Split, TileSet};

use super::config::RunConfig;

pub const INDEX_FILE: &str = "index.json";
pub const CONFIG_FILE: &str = "config.json";

/// Tiling geometry of one slide plus the grid coordinates of its kept patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub slide_id: String,
    pub class_label: usize,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub coords: Vec<(usize, usize)>,
    /// Raw RGB bytes of the kept patches, concatenated in `coords` order.
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileIndex {
    pub config: serde_json::Value,
    pub slides: Vec<TileRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub slide_id: String,
    pub rows: usize,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub config: serde_json::Value,
    pub embed_dim: usize,
    pub slides: Vec<EmbeddingRecord>,
}

/// One graph container plus the geometry needed to draw heatmaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub slide_id: String,
    pub label: usize,
    pub split: Split,
    pub num_nodes: usize,
    pub dir: String,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphIndex {
    pub config: serde_json::Value,
    /// Per-dimension shift and scale applied to node features, when standardized.
    #[serde(default)]
    pub feature_shift: Option<Vec<f64>>,
    #[serde(default)]
    pub feature_scale: Option<Vec<f64>>,
    pub graphs: Vec<GraphRecord>,
}

impl GraphIndex {
    pub fn find(&self, slide_id: &str) -> Option<&GraphRecord> {
        self.graphs.iter().find(|g| g.slide_id == slide_id)
    }
}

fn load_index<T: serde::de::DeserializeOwned>(dir: &Path, what: &str) -> Result<T> {
    let path = dir.join(INDEX_FILE);
    if !path.exists() {
        return Err(GtpError::validation(&path, format!("missing {what} index; is this a {what} directory?")));
    }
    io::read_json(&path)
}

/// Tiles a slide and drops background patches.
pub fn tile_and_filter(slide: &Slide, cfg: &RunConfig) -> Result<TileSet> {
    let tiles = tile_slide(
        slide,
        cfg.synth.patch_size,
        cfg.tiling.overlap,
        cfg.synth.background_luminance,
    )?;
    filter_background(tiles, cfg.tiling.tissue_threshold)
}

impl TileRecord {
    fn new(slide_id: &str, split: Split, slide: &Slide, tiles: &TileSet) -> Self {
        Self {
            slide_id: slide_id.to_string(),
            class_label: slide.class_label,
            split,
            height: slide.height,
            width: slide.width,
            patch_size: tiles.patch_size,
            stride: tiles.stride,
            grid_rows: tiles.grid_rows,
            grid_cols: tiles.grid_cols,
            coords: tiles.coords(),
            file: format!("{slide_id}.rgb"),
        }
    }

    pub fn read_patches(&self, dir: &Path) -> Result<Vec<Vec<u8>>> {
        let path = dir.join(&self.file);
        let bytes = std::fs::read(&path).map_err(|e| GtpError::io(&path, e))?;
        let per = self.patch_size * self.patch_size * 3;
        if bytes.len() != per * self.coords.len() {
            return Err(GtpError::validation(
                path,
                format!("{} bytes, expected {} patches of {per}", bytes.len(), self.coords.len()),
            ));
        }
        Ok(bytes.chunks_exact(per).map(<[u8]>::to_vec).collect())
    }

    /// Rebuilds the kept part of the tile set (discarded patches are not stored).
    pub fn tile_set(&self, patches: Vec<Vec<u8>>) -> TileSet {
        let mut kept_mask = vec![false; self.grid_rows * self.grid_cols];
        let patches = self
            .coords
            .iter()
            .zip(patches)
            .map(|(&coord, pixels)| {
                kept_mask[coord.0 * self.grid_cols + coord.1] = true;
                Patch {
                    coord,
                    origin: (coord.0 * self.stride, coord.1 * self.stride),
                    pixels,
                    tissue_fraction: f64::NAN,
                }
            })
            .collect();
        TileSet {
            patch_size: self.patch_size,
            stride: self.stride,
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            patches,
            discarded: Vec::new(),
            kept_mask,
        }
    }
}

/// Tiles every slide of a dataset into `out`.
pub fn tile_dataset(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TileIndex> {
    let (manifest, dir) = DatasetManifest::load(data)?;
    io::create_dir(out)?;
    let slides = manifest
        .slides
        .par_iter()
        .map(|entry| {
            let slide = entry.read_slide(&dir)?;
            let tiles = tile_and_filter(&slide, cfg).map_err(|e| match e {
                GtpError::EmptySlide => GtpError::validation(dir.join(&entry.image), "no patch passed the tissue filter"),
                other => other,
            })?;
            let record = TileRecord::new(&entry.slide_id, entry.split, &slide, &tiles);
            let bytes: Vec<u8> = tiles.patches.iter().flat_map(|p| p.pixels.iter().copied()).collect();
            let path = out.join(&record.file);
            std::fs::write(&path, bytes).map_err(|e| GtpError::io(&path, e))?;
            Ok(record)
        })
        .collect::<Result<Vec<_>>>()?;
    let index = TileIndex {
        config: cfg.echo(),
        slides,
    };
    io::write_json(&out.join(INDEX_FILE), &index)?;
    Ok(index)
}

pub fn load_tiles(dir: &Path) -> Result<TileIndex> {
    load_index(dir, "tile")
}

/// Seeded subsample of all kept patches, resampled to the encoder input size.
pub fn pretrain_corpus(cfg: &RunConfig, tiles: &Path) -> Result<Vec<crate::contrastive::RgbImage>> {
    let index = load_tiles(tiles)?;
    let mut all: Vec<(usize, usize)> = Vec::new();
    for (s, rec) in index.slides.iter().enumerate() {
        all.extend((0..rec.coords.len()).map(|p| (s, p)));
    }
    let take = cfg.pretrain_corpus.min(all.len());
    let mut rng = rng::stream(cfg.pretrain.seed, 0xC0);
    let mut picks = rand::seq::index::sample(&mut rng, all.len(), take).into_vec();
    picks.sort_unstable();
    let input = cfg.pretrain.encoder.input_size;
    let per_slide: Vec<Vec<usize>> = (0..index.slides.len())
        .map(|s| picks.iter().filter(|&&i| all[i].0 == s).map(|&i| all[i].1).collect())
        .collect();
    let images = index
        .slides
        .par_iter()
        .zip(&per_slide)
        .map(|(rec, wanted)| {
            if wanted.is_empty() {
                return Ok(Vec::new());
            }
            let patches = rec.read_patches(tiles)?;
            Ok(prepare_patches(wanted.iter().map(|&p| patches[p].as_slice()), rec.patch_size, input))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(images.into_iter().flatten().collect())
}

pub fn pretrain_log_csv(log: &[PretrainLogEntry]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for e in log {
        let _ = writeln!(out, "{},{},{}", e.step, e.loss, e.lr);
    }
    out
}

/// Contrastive pretraining on tiled patches; writes the encoder checkpoint,
/// `pretrain_log.csv` and the config echo into `out`.
pub fn pretrain_stage(cfg: &RunConfig, tiles: &Path, out: &Path) -> Result<(EncoderParams, Vec<PretrainLogEntry>)> {
    let corpus = pretrain_corpus(cfg, tiles)?;
    let (params, log) = pretrain_encoder(&corpus, &cfg.pretrain)?;
    save_encoder(out, &params, cfg.pretrain.seed, cfg.pretrain.tau)?;
    let path = out.join("pretrain_log.csv");
    std::fs::write(&path, pretrain_log_csv(&log)).map_err(|e| GtpError::io(&path, e))?;
    io::write_json(&out.join(CONFIG_FILE), &cfg.echo())?;
    Ok((params, log))
}

/// Embeds every kept patch of every tiled slide.
pub fn embed_stage(cfg: &RunConfig, encoder: &Path, tiles: &Path, out: &Path) -> Result<EmbeddingIndex> {
    let params = load_encoder(encoder)?;
    let index = load_tiles(tiles)?;
    io::create_dir(out)?;
    let mut slides = Vec::with_capacity(index.slides.len());
    // slides run one after another; batches inside a slide run in parallel
    for rec in &index.slides {
        let patches = rec.read_patches(tiles)?;
        let images = prepare_patches(patches.iter().map(Vec::as_slice), rec.patch_size, params.config.input_size);
        let emb = embed_patches(&params, &images)?;
        let file = format!("{}.f32", rec.slide_id);
        io::write_f32(&out.join(&file), emb.data())?;
        slides.push(EmbeddingRecord {
            slide_id: rec.slide_id.clone(),
            rows: emb.rows(),
            file,
        });
    }
    let index = EmbeddingIndex {
        config: cfg.echo(),
        embed_dim: params.embed_dim(),
        slides,
    };
    io::write_json(&out.join(INDEX_FILE), &index)?;
    Ok(index)
}

pub fn load_embeddings(dir: &Path) -> Result<EmbeddingIndex> {
    load_index(dir, "embedding")
}

/// Joins tiles and embeddings into one graph container per slide.
pub fn build_graph_stage(cfg: &RunConfig, tiles: &Path, embeddings: &Path, out: &Path) -> Result<GraphIndex> {
    let tile_index = load_tiles(tiles)?;
    let emb_index = load_embeddings(embeddings)?;
    io::create_dir(out)?;
    let features = tile_index
        .slides
        .par_iter()
        .map(|rec| {
            let emb = emb_index
                .slides
                .iter()
                .find(|e| e.slide_id == rec.slide_id)
                .ok_or_else(|| GtpError::validation(embeddings.join(INDEX_FILE), format!("no embeddings for slide {}", rec.slide_id)))?;
            let path = embeddings.join(&emb.file);
            let values = io::read_f32(&path)?;
            Tensor::matrix(emb.rows, emb_index.embed_dim, values).map_err(|e| GtpError::validation(&path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = cfg.standardize_features.then(|| feature_stats(&features, emb_index.embed_dim));
    let graphs = tile_index
        .slides
        .par_iter()
        .zip(features)
        .map(|(rec, mut features)| {
            let path = embeddings.join(INDEX_FILE);
            if let Some((shift, scale)) = &stats {
                standardize(&mut features, shift, scale);
            }
            let tiles = rec.tile_set(vec![Vec::new(); rec.coords.len()]);
            let graph = assemble_graph(&rec.slide_id, &tiles, features, Some(rec.class_label), cfg.model.connectivity)
                .map_err(|e| GtpError::validation(&path, e.to_string()))?;
            graph.save(&out.join(&rec.slide_id))?;
            Ok(GraphRecord {
                slide_id: rec.slide_id.clone(),
                label: rec.class_label,
                split: rec.split,
                num_nodes: graph.num_nodes(),
                dir: rec.slide_id.clone(),
                height: rec.height,
                width: rec.width,
                patch_size: rec.patch_size,
                stride: rec.stride,
                grid_rows: rec.grid_rows,
                grid_cols: rec.grid_cols,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (feature_shift, feature_scale) = stats.unzip();
    let index = GraphIndex {
        config: cfg.echo(),
        feature_shift,
        feature_scale,
        graphs,
    };
    io::write_json(&out.join(INDEX_FILE), &index)?;
    Ok(index)
}

/// Mean and standard deviation of every feature dimension over all patches.
fn feature_stats(features: &[Tensor], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let mut n: f64 = 0.0;
    for f in features {
        for r in 0..f.rows() {
            for (j, v) in f.row(r).iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n.max(1.0)).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n.max(1.0) - m * m).max(0.0).sqrt().max(1e-8))
        .collect();
    (mean, std)
}

fn standardize(features: &mut Tensor, shift: &[f64], scale: &[f64]) {
    let dim = shift.len();
    for (i, v) in features.data_mut().iter_mut().enumerate() {
        *v = (*v - shift[i % dim]) / scale[i % dim];
    }
}

/// Loads the graph index and every container it lists, validating each.
pub fn load_graphs(dir: &Path) -> Result<(GraphIndex, Vec<WsiGraph>)> {
    let index: GraphIndex = load_index(dir, "graph")?;
    let graphs = index
        .graphs
        .par_iter()
        .map(|rec| {
            let path: PathBuf = dir.join(&rec.dir);
            let g = WsiGraph::load(&path)?;
            if g.label != Some(rec.label) || g.num_nodes() != rec.num_nodes {
                return Err(GtpError::validation(path, "container disagrees with the graph index"));
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, graphs))
}
