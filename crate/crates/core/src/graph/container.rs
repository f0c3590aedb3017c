use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adjacency::{build_adjacency, normalize_adjacency, Connectivity, NormalizedAdjacency};
use crate::error::{GtpError, Result};
use crate::io;
use crate::numerics::Tensor;
use crate::synth::{TileSet, NUM_CLASSES};

/// One slide as a graph: node features, canonical edges and grid coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct WsiGraph {
    pub slide_id: String,
    /// N×D node feature matrix, one row per kept patch.
    pub features: Tensor,
    /// Canonical undirected edges, `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// (grid row, grid col) per node.
    pub coords: Vec<(i32, i32)>,
    pub label: Option<usize>,
    pub patch_size: usize,
    pub connectivity: Connectivity,
}

/// `manifest.json` of a graph container directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphManifest {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub patch_size: usize,
    pub label: Option<usize>,
    pub slide_id: String,
    #[serde(default)]
    pub connectivity: Connectivity,
}

const FEATURES: &str = "features.f32";
const EDGES: &str = "edges.u32";
const COORDS: &str = "coords.i32";

/// Builds the graph for a filtered tile set; row `i` of `embeddings` belongs to patch `i`.
pub fn assemble_graph(
    slide_id: &str,
    tiles: &TileSet,
    embeddings: Tensor,
    label: Option<usize>,
    connectivity: Connectivity,
) -> Result<WsiGraph> {
    if tiles.patches.is_empty() {
        return Err(GtpError::EmptySlide);
    }
    if embeddings.rows() != tiles.patches.len() || embeddings.shape().len() != 2 {
        return Err(GtpError::invalid(format!(
            "{} embedding rows for {} kept patches",
            embeddings.rows(),
            tiles.patches.len()
        )));
    }
    let coords: Vec<(i32, i32)> = tiles.patches.iter().map(|p| (p.coord.0 as i32, p.coord.1 as i32)).collect();
    let edges = build_adjacency(&coords, connectivity)?;
    let graph = WsiGraph {
        slide_id: slide_id.to_string(),
        features: embeddings,
        edges,
        coords,
        label,
        patch_size: tiles.patch_size,
        connectivity,
    };
    graph.validate()?;
    Ok(graph)
}

impl WsiGraph {
    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn normalized_adjacency(&self) -> Result<NormalizedAdjacency> {
        normalize_adjacency(&self.edges, self.num_nodes())
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes()];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<WsiGraph> {
        let n = self.num_nodes();
        if perm.len() != n {
            return Err(GtpError::invalid("permutation length differs from node count"));
        }
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(GtpError::invalid("not a permutation"));
            }
            inverse[old] = new;
        }
        let mut edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (inverse[i], inverse[j]);
                (a.min(b), a.max(b))
            })
            .collect();
        edges.sort_unstable();
        Ok(WsiGraph {
            features: self.features.permute_rows(perm),
            edges,
            coords: perm.iter().map(|&p| self.coords[p]).collect(),
            ..self.clone()
        })
    }

    /// Checks every structural invariant of the graph.
    pub fn validate(&self) -> Result<()> {
        let here = Path::new(&self.slide_id);
        let fail = |why: String| Err(GtpError::validation(here, why));
        let n = self.num_nodes();
        if n == 0 {
            return fail("graph has no nodes".into());
        }
        if self.coords.len() != n {
            return fail(format!("{} coords for {} nodes", self.coords.len(), n));
        }
        if !self.features.is_finite() {
            return fail("non-finite node features".into());
        }
        if let Some(label) = self.label {
            if label >= NUM_CLASSES {
                return fail(format!("label {label} outside 0..{NUM_CLASSES}"));
            }
        }
        for w in self.edges.windows(2) {
            if w[0] >= w[1] {
                return fail(format!("edges not in canonical order at {:?}", w[1]));
            }
        }
        let expected = build_adjacency(&self.coords, self.connectivity).map_err(|e| GtpError::validation(here, e.to_string()))?;
        if expected != self.edges {
            return fail("edge list does not match coordinate adjacency".into());
        }
        if self.degrees().iter().any(|&d| d > self.connectivity.max_degree()) {
            return fail("node degree exceeds neighborhood size".into());
        }
        Ok(())
    }

    pub fn manifest(&self) -> GraphManifest {
        GraphManifest {
            num_nodes: self.num_nodes(),
            feature_dim: self.feature_dim(),
            patch_size: self.patch_size,
            label: self.label,
            slide_id: self.slide_id.clone(),
            connectivity: self.connectivity,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        io::write_json(&dir.join("manifest.json"), &self.manifest())?;
        io::write_f32(&dir.join(FEATURES), self.features.data())?;
        let edges: Vec<u32> = self.edges.iter().flat_map(|&(i, j)| [i as u32, j as u32]).collect();
        io::write_u32(&dir.join(EDGES), &edges)?;
        let coords: Vec<i32> = self.coords.iter().flat_map(|&(r, c)| [r, c]).collect();
        io::write_i32(&dir.join(COORDS), &coords)
    }

    /// Reads a container and validates all invariants.
    pub fn load(dir: &Path) -> Result<WsiGraph> {
        let m: GraphManifest = io::read_json(&dir.join("manifest.json"))?;
        let features = io::read_f32(&dir.join(FEATURES))?;
        if features.len() != m.num_nodes * m.feature_dim {
            return Err(GtpError::validation(
                dir.join(FEATURES),
                format!("{} values, expected {}x{}", features.len(), m.num_nodes, m.feature_dim),
            ));
        }
        let raw_edges = io::read_u32(&dir.join(EDGES))?;
        if raw_edges.len() % 2 != 0 {
            return Err(GtpError::validation(dir.join(EDGES), "odd number of endpoints"));
        }
        let edges: Vec<(usize, usize)> = raw_edges.chunks_exact(2).map(|p| (p[0] as usize, p[1] as usize)).collect();
        if edges.iter().any(|&(i, j)| i >= j || j >= m.num_nodes) {
            return Err(GtpError::validation(dir.join(EDGES), "edge endpoint out of range or not i < j"));
        }
        let raw_coords = io::read_i32(&dir.join(COORDS))?;
        if raw_coords.len() != 2 * m.num_nodes {
            return Err(GtpError::validation(dir.join(COORDS), "coordinate count differs from node count"));
        }
        let graph = WsiGraph {
            slide_id: m.slide_id,
            features: Tensor::matrix(m.num_nodes, m.feature_dim, features)?,
            edges,
            coords: raw_coords.chunks_exact(2).map(|p| (p[0], p[1])).collect(),
            label: m.label,
            patch_size: m.patch_size,
            connectivity: m.connectivity,
        };
        graph.validate().map_err(|e| GtpError::validation(dir, e.to_string()))?;
        Ok(graph)
    }
}
