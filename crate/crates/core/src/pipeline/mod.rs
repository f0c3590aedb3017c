//! End-to-end stages shared by the command line and the Python bindings:
//! dataset synthesis, tiling, encoder pretraining, embedding, graph
//! building, cross-validated training, evaluation, GraphCAM and ablation.

mod config;
mod dataset;
mod experiment;
mod stages;

pub use config::{derive_seed, AblationConfig, DatasetConfig, ExplainConfig, RunConfig, TilingConfig};
pub use dataset::{assign_splits, generate_dataset, slide_id, synthesize};
pub use experiment::{
    ablate_stage, eval_stage, examples, explain_graph, explain_stage, predict, run_folds, train_stage, AblationRow,
    AblationTable, Explanation, FoldManifest, FoldResult, TrainSummary,
};
pub use stages::{
    build_graph_stage, embed_stage, load_embeddings, load_graphs, load_tiles, pretrain_corpus, pretrain_log_csv,
    pretrain_stage, tile_and_filter, tile_dataset, EmbeddingIndex, EmbeddingRecord, GraphIndex, GraphRecord, TileIndex,
    TileRecord, CONFIG_FILE, INDEX_FILE,
};
