use std::sync::Arc;

use crate::graph::{gcn_normalize, normalized, DirectedEdges, SimilarityGraph};
use crate::numerics::{CsrMatrix, Tensor};

/// Graph-derived structures shared by every forward pass over one cohort.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub n: usize,
    /// Both directions of each kernel edge, no self-loops.
    pub edges: DirectedEdges,
    /// `w_ij / √(d_i d_j)` per entry of `edges`, as an `E×1` column.
    pub edge_norm: Tensor,
    /// Kernel edges plus unit self-loops, for GAT.
    pub self_loop_edges: DirectedEdges,
    /// `D^{-1/2} A D^{-1/2}`.
    pub sym_adj: Arc<CsrMatrix>,
    /// `D̃^{-1/2}(A + I)D̃^{-1/2}`.
    pub gcn_adj: Arc<CsrMatrix>,
}

impl GraphContext {
    /// With `binary_degree`, the degrees in the normalization count
    /// neighbours instead of summing weights (GCN normalization is unaffected).
    pub fn new(g: &SimilarityGraph, binary_degree: bool) -> Self {
        let degree: Vec<f64> = if binary_degree {
            let mut c = vec![0.0; g.n];
            for e in &g.edges {
                c[e.i] += 1.0;
                c[e.j] += 1.0;
            }
            c
        } else {
            g.degree.clone()
        };
        let edges = DirectedEdges::from_graph(g, false);
        let norm: Vec<f64> = (0..edges.len()).map(|e| normalized(edges.weight[e], degree[edges.src[e]], degree[edges.dst[e]])).collect();
        let triplets: Vec<(usize, usize, f64)> = (0..edges.len()).map(|e| (edges.src[e], edges.dst[e], norm[e])).collect();
        let sym_adj = CsrMatrix::from_triplets(g.n, g.n, &triplets);
        Self {
            n: g.n,
            edge_norm: Tensor::column(norm),
            self_loop_edges: DirectedEdges::from_graph(g, true),
            edges,
            sym_adj: Arc::new(sym_adj),
            gcn_adj: Arc::new(gcn_normalize(g)),
        }
    }

    /// Context of an edgeless graph, for models that ignore structure.
    pub fn empty(n: usize) -> Self {
        let g = SimilarityGraph::from_edges(n, 0, Vec::new(), Default::default());
        Self::new(&g, false)
    }
}
