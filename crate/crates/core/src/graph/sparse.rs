use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::SimilarityGraph;
use crate::numerics::CsrMatrix;

/// Both directions of every edge, sorted by `(src, dst)`, so each source's
/// out-edges form the contiguous span `offsets[src]..offsets[src + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectedEdges {
    pub n: usize,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub weight: Vec<f64>,
    pub offsets: Arc<[usize]>,
}

impl DirectedEdges {
    /// Self-loops, when requested, get weight 1.
    pub fn from_graph(g: &SimilarityGraph, self_loops: bool) -> Self {
        let mut pairs: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * g.edges.len() + if self_loops { g.n } else { 0 });
        for e in &g.edges {
            pairs.push((e.i, e.j, e.w));
            pairs.push((e.j, e.i, e.w));
        }
        if self_loops {
            pairs.extend((0..g.n).map(|v| (v, v, 1.0)));
        }
        pairs.sort_by_key(|p| (p.0, p.1));
        let mut offsets = vec![0usize; g.n + 1];
        for &(s, _, _) in &pairs {
            offsets[s + 1] += 1;
        }
        for v in 0..g.n {
            offsets[v + 1] += offsets[v];
        }
        Self {
            n: g.n,
            src: pairs.iter().map(|p| p.0).collect(),
            dst: pairs.iter().map(|p| p.1).collect(),
            weight: pairs.iter().map(|p| p.2).collect(),
            offsets: offsets.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// `w / √(d_a·d_b)`, or 0 when either degree is 0. One rounding for the
/// product keeps regular graphs exact (1/k for unit weights).
pub(crate) fn normalized(w: f64, da: f64, db: f64) -> f64 {
    let p = da * db;
    if p > 0.0 {
        w / p.sqrt()
    } else {
        0.0
    }
}

/// `D^{-1/2} A D^{-1/2}` with weighted degrees. Isolated vertices give
/// all-zero rows and columns.
pub fn sym_normalize(g: &SimilarityGraph) -> CsrMatrix {
    let d = &g.degree;
    let mut triplets = Vec::with_capacity(2 * g.edges.len());
    for e in &g.edges {
        let v = normalized(e.w, d[e.i], d[e.j]);
        triplets.push((e.i, e.j, v));
        triplets.push((e.j, e.i, v));
    }
    CsrMatrix::from_triplets(g.n, g.n, &triplets)
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` for graph convolution.
pub fn gcn_normalize(g: &SimilarityGraph) -> CsrMatrix {
    let d: Vec<f64> = g.degree.iter().map(|&d| d + 1.0).collect();
    let mut triplets = Vec::with_capacity(2 * g.edges.len() + g.n);
    for e in &g.edges {
        let v = normalized(e.w, d[e.i], d[e.j]);
        triplets.push((e.i, e.j, v));
        triplets.push((e.j, e.i, v));
    }
    triplets.extend((0..g.n).map(|v| (v, v, 1.0 / d[v])));
    CsrMatrix::from_triplets(g.n, g.n, &triplets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub n_vertices: usize,
    pub n_edges: usize,
    /// Mean number of neighbours, `2E / N`.
    pub mean_degree: f64,
    pub mean_weighted_degree: f64,
    pub n_isolated: usize,
    /// Min, 25th, 50th, 75th percentile and max edge weight (nearest rank).
    /// Empty when there are no edges.
    pub weight_quantiles: Vec<f64>,
}

pub fn graph_stats(g: &SimilarityGraph) -> GraphStats {
    let mut neighbours = vec![0usize; g.n];
    for e in &g.edges {
        neighbours[e.i] += 1;
        neighbours[e.j] += 1;
    }
    let mut w: Vec<f64> = g.edges.iter().map(|e| e.w).collect();
    w.sort_by(f64::total_cmp);
    let quantiles = if w.is_empty() {
        Vec::new()
    } else {
        [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|q| w[((w.len() - 1) as f64 * q).round() as usize]).collect()
    };
    let nf = g.n.max(1) as f64;
    GraphStats {
        n_vertices: g.n,
        n_edges: g.edges.len(),
        mean_degree: 2.0 * g.edges.len() as f64 / nf,
        mean_weighted_degree: g.degree.iter().sum::<f64>() / nf,
        n_isolated: neighbours.iter().filter(|&&c| c == 0).count(),
        weight_quantiles: quantiles,
    }
}
