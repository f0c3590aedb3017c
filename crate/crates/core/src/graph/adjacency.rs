use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{GtpError, Result};
use crate::numerics::{SparseMatrix, Tensor};

/// Neighborhood used to connect grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Edge and corner neighbors (Chebyshev distance 1).
    #[default]
    #[serde(rename = "8")]
    Eight,
    /// Edge neighbors only (Manhattan distance 1).
    #[serde(rename = "4")]
    Four,
}

impl Connectivity {
    pub fn max_degree(self) -> usize {
        match self {
            Connectivity::Eight => 8,
            Connectivity::Four => 4,
        }
    }

    pub fn adjacent(self, a: (i32, i32), b: (i32, i32)) -> bool {
        let (dr, dc) = ((a.0 - b.0).abs(), (a.1 - b.1).abs());
        match self {
            Connectivity::Eight => dr.max(dc) == 1,
            Connectivity::Four => dr + dc == 1,
        }
    }

    fn offsets(self) -> &'static [(i32, i32)] {
        match self {
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
        }
    }
}

/// Canonical undirected edge list (`i < j`, sorted) over grid coordinates.
pub fn build_adjacency(coords: &[(i32, i32)], connectivity: Connectivity) -> Result<Vec<(usize, usize)>> {
    let mut index = HashMap::with_capacity(coords.len());
    for (i, &c) in coords.iter().enumerate() {
        if let Some(prev) = index.insert(c, i) {
            return Err(GtpError::invalid(format!("duplicate coordinate {c:?} at nodes {prev} and {i}")));
        }
    }
    let mut edges = Vec::new();
    for (i, &(r, c)) in coords.iter().enumerate() {
        for &(dr, dc) in connectivity.offsets() {
            if let Some(&j) = index.get(&(r + dr, c + dc)) {
                if i < j {
                    edges.push((i, j));
                }
            }
        }
    }
    edges.sort_unstable();
    Ok(edges)
}

/// Dense `Ã = A + I` and its row sums `D̃`.
pub fn self_loop_adjacency(edges: &[(usize, usize)], n: usize) -> Result<(Tensor, Vec<f64>)> {
    if n == 0 {
        return Err(GtpError::invalid("adjacency of an empty graph"));
    }
    let mut a = Tensor::eye(n);
    for &(i, j) in edges {
        if i >= n || j >= n || i == j {
            return Err(GtpError::invalid(format!("edge ({i}, {j}) invalid for {n} nodes")));
        }
        a.set(i, j, 1.0);
        a.set(j, i, 1.0);
    }
    let degrees = (0..n).map(|i| a.row(i).iter().sum()).collect();
    Ok((a, degrees))
}

/// `Â = D̃^{-1/2} (A + I) D̃^{-1/2}`, stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub matrix: Tensor,
}

pub fn normalize_adjacency(edges: &[(usize, usize)], n: usize) -> Result<NormalizedAdjacency> {
    let (mut a, degrees) = self_loop_adjacency(edges, n)?;
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 {
                a.set(i, j, v / (degrees[i] * degrees[j]).sqrt());
            }
        }
    }
    Ok(NormalizedAdjacency { matrix: a })
}

/// Sparse `Ã = A + I` and its row sums `D̃`.
pub fn sparse_self_loop(edges: &[(usize, usize)], n: usize) -> Result<(SparseMatrix, Vec<f64>)> {
    if n == 0 {
        return Err(GtpError::invalid("adjacency of an empty graph"));
    }
    let mut degrees = vec![1.0; n];
    let mut triplets: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 1.0)).collect();
    for &(i, j) in edges {
        if i >= n || j >= n || i == j {
            return Err(GtpError::invalid(format!("edge ({i}, {j}) invalid for {n} nodes")));
        }
        triplets.push((i, j, 1.0));
        triplets.push((j, i, 1.0));
        degrees[i] += 1.0;
        degrees[j] += 1.0;
    }
    Ok((SparseMatrix::from_triplets(n, n, triplets)?, degrees))
}

/// Sparse `Â`, entry-for-entry equal to [`normalize_adjacency`].
pub fn sparse_normalized(edges: &[(usize, usize)], n: usize) -> Result<SparseMatrix> {
    let (a, degrees) = sparse_self_loop(edges, n)?;
    let triplets = (0..n)
        .flat_map(|i| a.row_entries(i).map(move |(j, v)| (i, j, v)).collect::<Vec<_>>())
        .map(|(i, j, v)| (i, j, v / (degrees[i] * degrees[j]).sqrt()))
        .collect();
    SparseMatrix::from_triplets(n, n, triplets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: i32, cols: i32) -> Vec<(i32, i32)> {
        (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect()
    }

    fn brute_force(coords: &[(i32, i32)], conn: Connectivity) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..coords.len() {
            for j in i + 1..coords.len() {
                if conn.adjacent(coords[i], coords[j]) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn sparse_forms_match_dense() {
        let coords = grid(3, 4);
        let edges = build_adjacency(&coords, Connectivity::Eight).unwrap();
        let (dense, deg) = self_loop_adjacency(&edges, 12).unwrap();
        let (sparse, sdeg) = sparse_self_loop(&edges, 12).unwrap();
        assert_eq!(sparse.to_dense(), dense);
        assert_eq!(sdeg, deg);
        let norm = normalize_adjacency(&edges, 12).unwrap();
        assert_eq!(sparse_normalized(&edges, 12).unwrap().to_dense(), norm.matrix);
    }

    #[test]
    fn small_cases() {
        assert!(build_adjacency(&[(0, 0)], Connectivity::Eight).unwrap().is_empty());
        assert_eq!(build_adjacency(&[(0, 0), (0, 1)], Connectivity::Eight).unwrap(), vec![(0, 1)]);
        assert!(build_adjacency(&[(0, 0), (0, 0)], Connectivity::Eight).is_err());
    }

    #[test]
    fn full_three_by_three_grid() {
        let coords = grid(3, 3);
        let edges = build_adjacency(&coords, Connectivity::Eight).unwrap();
        assert_eq!(edges, brute_force(&coords, Connectivity::Eight));
        assert_eq!(edges.len(), 20);
        let mut deg = [0; 9];
        for &(i, j) in &edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        assert_eq!(deg[4], 8);
        assert_eq!([deg[0], deg[2], deg[6], deg[8]], [3; 4]);
        assert_eq!([deg[1], deg[3], deg[5], deg[7]], [5; 4]);
    }

    #[test]
    fn four_connectivity_drops_diagonals() {
        let coords = grid(3, 3);
        let edges = build_adjacency(&coords, Connectivity::Four).unwrap();
        assert_eq!(edges, brute_force(&coords, Connectivity::Four));
        assert_eq!(edges.len(), 12);
    }

    #[test]
    fn normalization_small_graphs() {
        assert_eq!(normalize_adjacency(&[], 1).unwrap().matrix.data(), &[1.0]);
        assert_eq!(normalize_adjacency(&[(0, 1)], 2).unwrap().matrix.data(), &[0.5; 4]);
        assert!(normalize_adjacency(&[], 0).is_err());

        // path 0-1-2: D̃ = diag(2, 3, 2), Â_ij = Ã_ij / sqrt(d_i d_j)
        let a = normalize_adjacency(&[(0, 1), (1, 2)], 3).unwrap().matrix;
        let d = [2.0f64, 3.0, 2.0];
        let tilde = [[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                let want = tilde[i][j] / (d[i] * d[j]).sqrt();
                assert!((a.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn matches_brute_force_on_random_holes(
            rows in 1i32..12, cols in 1i32..17, seed in 0u64..1000, keep in 0.2f64..1.0
        ) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, 0);
            let coords: Vec<_> = grid(rows, cols).into_iter().filter(|_| rng.random::<f64>() < keep).collect();
            for conn in [Connectivity::Eight, Connectivity::Four] {
                let edges = build_adjacency(&coords, conn).unwrap();
                proptest::prop_assert_eq!(&edges, &brute_force(&coords, conn));
                let mut deg = vec![0; coords.len()];
                for &(i, j) in &edges { deg[i] += 1; deg[j] += 1; }
                proptest::prop_assert!(deg.iter().all(|&d| d <= conn.max_degree()));
            }
        }
    }
}
