use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::Result;
use crate::io;
use crate::rng;
use crate::synth::{generate_slide, DatasetManifest, Slide, SlideEntry, Split, NUM_CLASSES};

use super::config::{derive_seed, RunConfig};

pub fn slide_id(index: usize, total: usize) -> String {
    let width = total.saturating_sub(1).to_string().len().max(3);
    format!("s{index:0width$}")
}

/// Slide-level split tags, stratified by class.
pub fn assign_splits(labels: &[usize], val_fraction: f64, test_fraction: f64, seed: u64) -> Vec<Split> {
    let mut splits = vec![Split::Train; labels.len()];
    let mut rng = rng::stream(seed, 0x5B17);
    for c in 0..NUM_CLASSES {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let order = rng::permutation(&mut rng, members.len());
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        let n_val = (members.len() as f64 * val_fraction).round() as usize;
        for (rank, &o) in order.iter().enumerate() {
            splits[members[o]] = if rank < n_test {
                Split::Test
            } else if rank < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
        }
    }
    splits
}

/// Renders the configured number of class-balanced slides.
///
/// Slide `i` has class `i mod 3` and its own derived seed, so the result is
/// independent of how generation is scheduled.
pub fn synthesize(cfg: &RunConfig) -> Result<Vec<(SlideEntry, Slide)>> {
    cfg.validate()?;
    let n = cfg.dataset.slides;
    let labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
    let splits = assign_splits(&labels, cfg.dataset.val_fraction, cfg.dataset.test_fraction, cfg.seed);
    let s = &cfg.synth;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, i as u64);
            let (lo, hi) = s.tumor_fraction_range;
            let fraction = if labels[i] == 0 || hi <= lo {
                lo.max(0.0) * (labels[i] > 0) as u8 as f64
            } else {
                rng::stream(seed, 7).random_range(lo..hi)
            };
            let slide = generate_slide(s, seed, labels[i], s.slide_height, s.slide_width, fraction)?;
            Ok((SlideEntry::for_slide(&slide_id(i, n), &slide, splits[i]), slide))
        })
        .collect()
}

/// Writes every slide plus `manifest.json` into `out`.
pub fn generate_dataset(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    io::create_dir(out)?;
    let slides = synthesize(cfg)?;
    slides.par_iter().try_for_each(|(entry, slide)| entry.write_slide(out, slide))?;
    let manifest = DatasetManifest {
        seed: cfg.seed,
        config: cfg.echo(),
        slides: slides.into_iter().map(|(e, _)| e).collect(),
    };
    manifest.save(out)?;
    Ok(manifest)
}
