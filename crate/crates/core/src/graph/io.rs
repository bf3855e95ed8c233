//! Edge-list text format:
//!
//! ```text
//! # n=<N>,feature_dim=<F>,k_neighbors=<k>,mu=<μ>,edge_threshold=<t>,rho_is_squared=<bool>
//! i,j,w
//! 0,5,1.2345678901234567e-3
//! ```
//!
//! Weights carry 17 significant digits so a write/read cycle is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Edge, GraphError, KernelParams, SimilarityGraph};

pub fn write_edge_list(g: &SimilarityGraph, path: impl AsRef<Path>) -> Result<(), GraphError> {
    let path = path.as_ref();
    let io_err = |source| GraphError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let p = &g.params;
    writeln!(
        w,
        "# n={},feature_dim={},k_neighbors={},mu={:?},edge_threshold={:?},rho_is_squared={}",
        g.n, g.feature_dim, p.k_neighbors, p.mu, p.edge_threshold, p.rho_is_squared
    )
    .map_err(io_err)?;
    writeln!(w, "i,j,w").map_err(io_err)?;
    for e in &g.edges {
        writeln!(w, "{},{},{:.16e}", e.i, e.j, e.w).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_edge_list(path: impl AsRef<Path>) -> Result<SimilarityGraph, GraphError> {
    let path = path.as_ref();
    let io_err = |source| GraphError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut lines = reader.lines().enumerate();
    let fmt = |line: usize, msg: &str| GraphError::Format { line: line + 1, msg: msg.to_string() };

    let (_, header) = lines.next().ok_or_else(|| fmt(0, "empty file"))?;
    let header = header.map_err(io_err)?;
    let meta = header.strip_prefix("# ").ok_or_else(|| fmt(0, "missing '# ' metadata header"))?;
    let mut n = None;
    let mut feature_dim = None;
    let mut params = KernelParams::default();
    for kv in meta.split(',') {
        let (k, v) = kv.split_once('=').ok_or_else(|| fmt(0, "expected key=value"))?;
        let bad = || fmt(0, &format!("bad value for {k}: {v}"));
        match k {
            "n" => n = Some(v.parse().map_err(|_| bad())?),
            "feature_dim" => feature_dim = Some(v.parse().map_err(|_| bad())?),
            "k_neighbors" => params.k_neighbors = v.parse().map_err(|_| bad())?,
            "mu" => params.mu = v.parse().map_err(|_| bad())?,
            "edge_threshold" => params.edge_threshold = v.parse().map_err(|_| bad())?,
            "rho_is_squared" => params.rho_is_squared = v.parse().map_err(|_| bad())?,
            other => return Err(fmt(0, &format!("unknown key {other}"))),
        }
    }
    let n: usize = n.ok_or_else(|| fmt(0, "missing n"))?;
    let feature_dim = feature_dim.ok_or_else(|| fmt(0, "missing feature_dim"))?;

    match lines.next() {
        Some((_, Ok(l))) if l.trim() == "i,j,w" => {}
        _ => return Err(fmt(1, "expected column header i,j,w")),
    }
    let mut edges = Vec::new();
    for (ln, line) in lines {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let mut next = |what: &str| parts.next().ok_or_else(|| fmt(ln, &format!("missing {what}")));
        let i: usize = next("i")?.trim().parse().map_err(|_| fmt(ln, "bad i"))?;
        let j: usize = next("j")?.trim().parse().map_err(|_| fmt(ln, "bad j"))?;
        let w: f64 = next("w")?.trim().parse().map_err(|_| fmt(ln, "bad w"))?;
        if i >= j || j >= n {
            return Err(fmt(ln, &format!("edge ({i},{j}) must satisfy i < j < n")));
        }
        edges.push(Edge { i, j, w });
    }
    Ok(SimilarityGraph::from_edges(n, feature_dim, edges, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::numerics::Tensor;

    #[test]
    fn round_trip_is_bit_exact() {
        let x = Tensor::from_fn(25, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.37 - 1.9);
        let p = KernelParams { k_neighbors: 4, mu: 0.35, ..Default::default() };
        let g = build_graph(&x, &p).unwrap();
        assert!(g.n_edges() > 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.edges");
        write_edge_list(&g, &path).unwrap();
        let back = read_edge_list(&path).unwrap();
        assert_eq!(back, g);
        for (a, b) in back.edges.iter().zip(&g.edges) {
            assert_eq!(a.w.to_bits(), b.w.to_bits());
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.edges");
        std::fs::write(&path, "# n=2,feature_dim=1,k_neighbors=1,mu=0.5,edge_threshold=1e-9,rho_is_squared=false\ni,j,w\n1,0,0.5\n").unwrap();
        assert!(matches!(read_edge_list(&path), Err(GraphError::Format { line: 3, .. })));
    }
}
