use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::PretrainConfig;
use crate::error::{GtpError, Result};
use crate::io;
use crate::model::GtpConfig;
use crate::synth::SynthConfig;

/// How many slides to synthesize and how to split them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub slides: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            slides: 300,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingConfig {
    /// Fraction of the patch shared by neighboring windows.
    pub overlap: f64,
    /// Minimum tissue fraction for a patch to become a node.
    pub tissue_threshold: f64,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            overlap: 0.0,
            tissue_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Clamp negative gradient-relevance products before averaging heads.
    pub clamp: bool,
    pub thresholds: Vec<f64>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            clamp: true,
            thresholds: crate::graphcam::default_thresholds(),
        }
    }
}

/// Hyperparameter grid swept by the ablation command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub pooled_nodes: Vec<usize>,
    pub gc_layers: Vec<usize>,
    pub blocks: Vec<usize>,
    pub folds: usize,
    /// Overrides the model's step count for every grid point.
    pub steps: Option<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            pooled_nodes: vec![80, 100, 120],
            gc_layers: vec![1, 3],
            blocks: vec![3, 6],
            folds: 5,
            steps: None,
        }
    }
}

/// Every science parameter of a run, echoed into each output manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset seed; slide seeds and splits derive from it.
    pub seed: u64,
    pub synth: SynthConfig,
    pub dataset: DatasetConfig,
    pub tiling: TilingConfig,
    pub pretrain: PretrainConfig,
    /// Upper bound on patches drawn into the contrastive corpus.
    pub pretrain_corpus: usize,
    /// Z-score node features per dimension over all patches before graph assembly.
    pub standardize_features: bool,
    pub model: GtpConfig,
    pub folds: usize,
    pub explain: ExplainConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            dataset: DatasetConfig::default(),
            tiling: TilingConfig::default(),
            pretrain: PretrainConfig::default(),
            pretrain_corpus: 4096,
            standardize_features: true,
            model: GtpConfig::default(),
            folds: 5,
            explain: ExplainConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = io::read_json(path)?;
        cfg.validate().map_err(|e| GtpError::validation(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.synth;
        if s.patch_size == 0 || s.slide_height % s.patch_size != 0 || s.slide_width % s.patch_size != 0 {
            return Err(GtpError::invalid(format!(
                "slide {}x{} is not a multiple of patch size {}",
                s.slide_height, s.slide_width, s.patch_size
            )));
        }
        let d = &self.dataset;
        if !(0.0..1.0).contains(&(d.val_fraction + d.test_fraction)) || d.val_fraction < 0.0 || d.test_fraction < 0.0 {
            return Err(GtpError::invalid("split fractions must be nonnegative and sum below 1"));
        }
        if !(0.0..1.0).contains(&self.tiling.overlap) {
            return Err(GtpError::invalid(format!("overlap {} outside [0, 1)", self.tiling.overlap)));
        }
        if self.pretrain.encoder.embed_dim != self.model.feature_dim {
            return Err(GtpError::invalid(format!(
                "encoder embeds {} features but the model expects {}",
                self.pretrain.encoder.embed_dim, self.model.feature_dim
            )));
        }
        self.pretrain.encoder.validate()?;
        self.model.validate()?;
        if self.explain.thresholds.is_empty() {
            return Err(GtpError::invalid("at least one heatmap threshold is required"));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; decorrelates seeds derived from one base.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = serde_json::from_value(cfg.echo()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 3, "model": {"pooled_nodes": 16}}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.pooled_nodes, 16);
        assert_eq!(cfg.model.hidden_dim, 128);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
    }
}
