//! Patch graphs: 8-connected adjacency over grid coordinates, the
//! symmetric self-looped normalization used by graph convolution, and the
//! on-disk graph container.

mod adjacency;
mod container;

pub use adjacency::{
    build_adjacency, normalize_adjacency, self_loop_adjacency, sparse_normalized, sparse_self_loop, Connectivity,
    NormalizedAdjacency,
};
pub use container::{assemble_graph, GraphManifest, WsiGraph};
