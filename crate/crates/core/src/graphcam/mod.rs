//! GraphCAM: class-specific relevance from gradient-weighted attention,
//! mapped back to patches through the pooling assignment.

mod heatmap;
pub mod lrp;
mod relevance;

pub use heatmap::{
    binarize_and_iou, colormap, default_thresholds, iou, reconstruct_heatmap, render_rgb, to_gray, write_heatmap,
    Heatmap, HeatmapSidecar, IouReport,
};
pub use relevance::{
    attention_relevance, graphcam, output_relevance, relevance_product, reverse_pool, transformer_relevance, weighted_attention,
    BlockRelevance, RelevanceMap,
};
