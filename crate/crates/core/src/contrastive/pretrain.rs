use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, NamedParams};
use crate::error::{GtpError, Result};
use crate::numerics::{Tape, Tensor};
use crate::optim::{cosine_lr, Adam};
use crate::rng;

use super::augment::{augment_pair, AugmentationConfig, RgbImage};
use super::encoder::{EncoderConfig, EncoderParams};
use super::loss::nt_xent_loss;

pub const ENCODER_KIND: &str = "encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub augment: AugmentationConfig,
    pub steps: usize,
    /// Patches per step; each contributes two views.
    pub batch: usize,
    pub tau: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            augment: AugmentationConfig::default(),
            steps: 200,
            batch: 64,
            tau: 0.5,
            lr: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Interleaved views `[a0, b0, a1, b1, ...]` of the selected patches.
fn views(corpus: &[RgbImage], picks: &[usize], cfg: &AugmentationConfig, seed: u64) -> Vec<RgbImage> {
    picks
        .par_iter()
        .enumerate()
        .map(|(slot, &i)| {
            let (a, b) = augment_pair(&corpus[i], cfg, seed ^ ((slot as u64) << 32) ^ i as u64);
            [a, b]
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Contrastive loss of one batch of patches under fixed augmentations.
pub fn batch_loss(params: &EncoderParams, corpus: &[RgbImage], cfg: &PretrainConfig, seed: u64) -> Result<f64> {
    let picks: Vec<usize> = (0..corpus.len()).collect();
    let v = views(corpus, &picks, &cfg.augment, seed);
    let refs: Vec<&RgbImage> = v.iter().collect();
    let z = params.project(&refs)?;
    super::loss::nt_xent_value(&z, cfg.tau)
}

/// Trains the encoder with Adam under a cosine-annealed learning rate.
///
/// Every step draws `batch` distinct patches, augments each twice and
/// minimizes the contrastive loss of the resulting `2·batch` projections.
pub fn pretrain_encoder(corpus: &[RgbImage], cfg: &PretrainConfig) -> Result<(EncoderParams, Vec<PretrainLogEntry>)> {
    if cfg.batch == 0 || corpus.len() < cfg.batch {
        return Err(GtpError::invalid(format!(
            "corpus of {} patches cannot fill a mini-batch of {}",
            corpus.len(),
            cfg.batch
        )));
    }
    let mut params = EncoderParams::init(cfg.encoder.clone(), cfg.seed)?;
    let mut adam = Adam::for_params(&params.tensors());
    let mut sampler = rng::stream(cfg.seed, 0x5A3B);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks = rand::seq::index::sample(&mut sampler, corpus.len(), cfg.batch).into_vec();
        let aug_seed: u64 = sampler.random();
        let v = views(corpus, &picks, &cfg.augment, aug_seed);
        let refs: Vec<&RgbImage> = v.iter().collect();

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let x = tape.constant(params.batch_tensor(&refs)?);
        let f = params.embed_vars(&mut tape, &vars, x)?;
        let z = params.project_vars(&mut tape, &vars, f)?;
        let loss = nt_xent_loss(&mut tape, z, cfg.tau)?;
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = EncoderParams::var_order(&vars).into_iter().map(|v| grads.get_or_zeros(v)).collect();

        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        adam.step(&mut params.tensors_mut(), &g, lr)?;
        log.push(PretrainLogEntry {
            step,
            loss: tape.value(loss).data()[0],
            lr,
        });
    }
    Ok((params, log))
}

/// Embedding matrix with one row per patch; the projection head is not applied.
pub fn embed_patches(params: &EncoderParams, patches: &[RgbImage]) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let d = params.embed_dim();
    if patches.is_empty() {
        return Tensor::matrix(0, d, Vec::new());
    }
    let parts: Vec<Tensor> = patches
        .par_chunks(CHUNK)
        .map(|chunk| params.embed(&chunk.iter().collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::matrix(patches.len(), d, data)
}

/// Resamples raw RGB patches of side `patch_size` to the encoder input size.
pub fn prepare_patches<'a>(pixels: impl IntoIterator<Item = &'a [u8]>, patch_size: usize, input_size: usize) -> Vec<RgbImage> {
    pixels
        .into_iter()
        .map(|p| RgbImage::from_patch(patch_size, p, input_size))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderCheckpointConfig {
    encoder: EncoderConfig,
    tau: f64,
}

pub fn save_encoder(dir: &Path, params: &EncoderParams, seed: u64, tau: f64) -> Result<()> {
    let config = serde_json::to_value(EncoderCheckpointConfig {
        encoder: params.config.clone(),
        tau,
    })
    .map_err(|e| GtpError::invalid(e.to_string()))?;
    checkpoint::save(dir, ENCODER_KIND, seed, config, params)
}

pub fn load_encoder(dir: &Path) -> Result<EncoderParams> {
    let (manifest, values) = checkpoint::load(dir, ENCODER_KIND)?;
    let cfg: EncoderCheckpointConfig = serde_json::from_value(manifest.config)
        .map_err(|e| GtpError::validation(dir, format!("bad encoder config: {e}")))?;
    let mut params = EncoderParams::init(cfg.encoder, manifest.seed)?;
    params.assign(&values)?;
    Ok(params)
}
