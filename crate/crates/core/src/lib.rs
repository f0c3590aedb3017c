//! Patch-graph transformer for whole-slide image classification.
//!
//! The pipeline: synthetic slides are tiled into patches, a small
//! convolutional encoder is pretrained contrastively to embed them, the
//! embeddings become node features of an 8-connected patch graph, and a
//! GCN → min-cut pooling → transformer classifier predicts the slide label.
//! GraphCAM maps the transformer's gradient-weighted attention relevance
//! back onto patches to produce a slide-space saliency map.

pub mod checkpoint;
pub mod contrastive;
pub mod error;
pub mod graph;
pub mod graphcam;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use error::{GtpError, Result};
pub use numerics::{Tape, Tensor, Var};
