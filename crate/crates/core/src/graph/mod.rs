//! Subject-similarity graph construction.
//!
//! Edge weights come from a scaled exponential (Gaussian density) kernel
//! whose bandwidth adapts to the local neighbourhood of both endpoints:
//!
//! ```text
//! σ_ij   = μ · (ρ̄_i + ρ̄_j + ρ_ij) / 3
//! W(i,j) = exp(−ρ_ij² / (2σ_ij²)) / √(2πσ_ij²)
//! ```
//!
//! where `ρ_ij` is the Euclidean distance and `ρ̄_i` the mean distance from
//! `i` to its `k` nearest neighbours. Pairs with `W > edge_threshold` become
//! edges. Distances are computed densely, so memory is `O(N²)`: about 0.5 GB
//! at N = 8000.

mod io;
mod kernel;
mod sparse;

pub use io::{read_edge_list, write_edge_list};
pub use kernel::{build_graph, kernel_weight, knn_mean_distance, pairwise_sq_distance};
pub use sparse::{gcn_normalize, graph_stats, sym_normalize, DirectedEdges, GraphStats};
pub(crate) use sparse::normalized;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("invalid kernel parameter: {0}")]
    InvalidParams(String),
    #[error("k = {k} neighbours requested but only {n} vertices")]
    TooFewVertices { k: usize, n: usize },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed edge list at line {line}: {msg}")]
    Format { line: usize, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub k_neighbors: usize,
    pub mu: f64,
    pub edge_threshold: f64,
    /// Read ρ as the squared distance everywhere (exponent uses its square,
    /// σ averages squared distances). Off by default.
    pub rho_is_squared: bool,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self { k_neighbors: 20, mu: 0.16, edge_threshold: 1e-9, rho_is_squared: false }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<(), GraphError> {
        if !(0.1..=1.0).contains(&self.mu) {
            return Err(GraphError::InvalidParams(format!("mu = {} outside [0.1, 1.0]", self.mu)));
        }
        if self.k_neighbors == 0 {
            return Err(GraphError::InvalidParams("k_neighbors must be at least 1".into()));
        }
        if self.edge_threshold.is_nan() || self.edge_threshold <= 0.0 {
            return Err(GraphError::InvalidParams(format!("edge_threshold = {} must be positive", self.edge_threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub w: f64,
}

/// Undirected weighted graph, each pair stored once with `i < j`, sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGraph {
    pub n: usize,
    pub feature_dim: usize,
    pub edges: Vec<Edge>,
    /// Weighted degree `Σ_j w_ij`.
    pub degree: Vec<f64>,
    pub params: KernelParams,
}

impl SimilarityGraph {
    pub fn from_edges(n: usize, feature_dim: usize, mut edges: Vec<Edge>, params: KernelParams) -> Self {
        edges.sort_by_key(|e| (e.i, e.j));
        let degree = weighted_degree(n, &edges);
        Self { n, feature_dim, edges, degree, params }
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Relabel vertices: vertex `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> SimilarityGraph {
        let edges = self
            .edges
            .iter()
            .map(|e| {
                let (a, b) = (perm[e.i], perm[e.j]);
                Edge { i: a.min(b), j: a.max(b), w: e.w }
            })
            .collect();
        SimilarityGraph::from_edges(self.n, self.feature_dim, edges, self.params.clone())
    }
}

fn weighted_degree(n: usize, edges: &[Edge]) -> Vec<f64> {
    let mut d = vec![0.0; n];
    for e in edges {
        d[e.i] += e.w;
        d[e.j] += e.w;
    }
    d
}
