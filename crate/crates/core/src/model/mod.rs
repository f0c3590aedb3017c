//! The graph-transformer classifier: graph convolution, min-cut pooling,
//! a class-token transformer and its training loop.

mod config;
mod forward;
mod params;
mod train;

pub use config::{GtpConfig, NUM_CLASSES};
pub use forward::{
    forward, forward_on_tape, gcn_forward, gcn_layer, infer, mincut_pool, mincut_pool_values, msa, msa_values,
    pooled_adjacency, transformer, transformer_forward, AttentionOverride, BlockTrace, ForwardParts, ForwardTrace, GraphInput,
    HeadTrace, PoolResult, PoolVars, TransformerVars,
};
pub use params::{BlockParams, BlockVars, GtpParams, ModelVars, INIT_STD};
pub use train::{
    attach_loss, history_csv, load_model, sample_gradients, save_model, train, train_from, write_history,
    HistoryEntry, LossParts, TrainExample, MODEL_KIND,
};
