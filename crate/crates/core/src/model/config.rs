use serde::{Deserialize, Serialize};

use crate::error::{GtpError, Result};
use crate::graph::Connectivity;

pub const NUM_CLASSES: usize = 3;

/// Architecture and optimization settings of the graph transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtpConfig {
    /// Node feature width, fixed by the patch encoder.
    pub feature_dim: usize,
    /// Width of every graph-convolution layer.
    pub hidden_dim: usize,
    pub gc_layers: usize,
    pub blocks: usize,
    pub heads: usize,
    pub transformer_dim: usize,
    pub mlp_dim: usize,
    /// Pooled node count.
    pub pooled_nodes: usize,
    pub lambda_cut: f64,
    pub lr: f64,
    /// Steps at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub connectivity: Connectivity,
}

impl Default for GtpConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            hidden_dim: 128,
            gc_layers: 3,
            blocks: 3,
            heads: 8,
            transformer_dim: 64,
            mlp_dim: 128,
            pooled_nodes: 120,
            lambda_cut: 1.0,
            lr: 1e-3,
            milestones: vec![120, 400],
            lr_decay: 0.1,
            batch_size: 8,
            steps: 600,
            seed: 0,
            connectivity: Connectivity::Eight,
        }
    }
}

impl GtpConfig {
    pub fn head_dim(&self) -> usize {
        self.transformer_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.feature_dim,
            self.hidden_dim,
            self.gc_layers,
            self.blocks,
            self.heads,
            self.transformer_dim,
            self.mlp_dim,
            self.pooled_nodes,
            self.batch_size,
        ];
        if sizes.contains(&0) {
            return Err(GtpError::invalid("model sizes must be positive"));
        }
        if self.transformer_dim % self.heads != 0 {
            return Err(GtpError::invalid(format!(
                "transformer width {} is not divisible by {} heads",
                self.transformer_dim, self.heads
            )));
        }
        if !(self.lr > 0.0) || !(self.lambda_cut >= 0.0) {
            return Err(GtpError::invalid("learning rate must be positive and λ nonnegative"));
        }
        Ok(())
    }
}
