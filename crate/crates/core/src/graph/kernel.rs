use rayon::prelude::*;

use super::{Edge, GraphError, KernelParams, SimilarityGraph};
use crate::numerics::Tensor;

/// `D[i][j] = Σ_f (x_if − x_jf)²` as an `N×N` tensor.
pub fn pairwise_sq_distance(x: &Tensor) -> Tensor {
    let (n, f) = (x.rows(), x.cols());
    let data = x.data();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &data[i * f..(i + 1) * f];
            (0..n)
                .map(|j| {
                    let xj = &data[j * f..(j + 1) * f];
                    xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum()
                })
                .collect()
        })
        .collect();
    Tensor::matrix(n, n, rows.concat()).expect("n x n")
}

/// ρ between two vertices under the configured reading.
fn rho(sq: f64, squared: bool) -> f64 {
    if squared {
        sq
    } else {
        sq.sqrt()
    }
}

/// Mean of the `k` smallest ρ values from each vertex to the others.
pub fn knn_mean_distance(sq_dist: &Tensor, k: usize, rho_is_squared: bool) -> Result<Vec<f64>, GraphError> {
    let n = sq_dist.rows();
    if k >= n {
        return Err(GraphError::TooFewVertices { k, n });
    }
    let out = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| rho(sq_dist.get(i, j), rho_is_squared)).collect();
            if k < d.len() {
                d.select_nth_unstable_by(k - 1, f64::total_cmp);
            }
            let mut nearest = d[..k].to_vec();
            nearest.sort_by(f64::total_cmp);
            nearest.iter().sum::<f64>() / k as f64
        })
        .collect();
    Ok(out)
}

/// Kernel evaluation for one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum KernelValue {
    Finite(f64),
    /// σ = 0 and ρ = 0: the density is unbounded.
    Degenerate,
}

pub(crate) fn kernel_value(sq: f64, rhobar_i: f64, rhobar_j: f64, params: &KernelParams) -> KernelValue {
    let r = rho(sq, params.rho_is_squared);
    // ρ² in the exponent: the squared distance itself under the default reading.
    let r2 = if params.rho_is_squared { sq * sq } else { sq };
    let sigma = params.mu * (rhobar_i + rhobar_j + r) / 3.0;
    if sigma == 0.0 {
        return if r == 0.0 { KernelValue::Degenerate } else { KernelValue::Finite(0.0) };
    }
    let s2 = sigma * sigma;
    KernelValue::Finite((-r2 / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt())
}

/// `W(i, j)` for `i ≠ j`. Degenerate pairs (σ = 0, ρ = 0) return `+∞`;
/// [`build_graph`] replaces those with a finite weight.
pub fn kernel_weight(i: usize, j: usize, sq_dist: &Tensor, rhobar: &[f64], params: &KernelParams) -> f64 {
    match kernel_value(sq_dist.get(i, j), rhobar[i], rhobar[j], params) {
        KernelValue::Finite(w) => w,
        KernelValue::Degenerate => f64::INFINITY,
    }
}

/// Build the thresholded similarity graph over the rows of `x`.
///
/// `k` is clamped to `N − 1` for tiny cohorts. Degenerate pairs receive the
/// largest finite weight in the graph (or `1/√(2π)`, the unit-bandwidth
/// density at zero, when no finite weight exists).
pub fn build_graph(x: &Tensor, params: &KernelParams) -> Result<SimilarityGraph, GraphError> {
    params.validate()?;
    let n = x.rows();
    if n < 2 {
        return Ok(SimilarityGraph::from_edges(n, x.cols(), Vec::new(), params.clone()));
    }
    let k = params.k_neighbors.min(n - 1);
    if k < params.k_neighbors {
        log::warn!("k_neighbors = {} clamped to {} for {} vertices", params.k_neighbors, k, n);
    }
    let sq = pairwise_sq_distance(x);
    let rhobar = knn_mean_distance(&sq, k, params.rho_is_squared)?;

    let per_row: Vec<Vec<(usize, KernelValue)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            ((i + 1)..n)
                .map(|j| (j, kernel_value(sq.get(i, j), rhobar[i], rhobar[j], params)))
                .filter(|(_, v)| match v {
                    KernelValue::Finite(w) => *w > params.edge_threshold,
                    KernelValue::Degenerate => true,
                })
                .collect()
        })
        .collect();

    let max_finite = per_row
        .iter()
        .flatten()
        .filter_map(|(_, v)| match v {
            KernelValue::Finite(w) => Some(*w),
            KernelValue::Degenerate => None,
        })
        .fold(None, |acc: Option<f64>, w| Some(acc.map_or(w, |a| a.max(w))));
    let n_degenerate = per_row.iter().flatten().filter(|(_, v)| matches!(v, KernelValue::Degenerate)).count();
    let fallback = max_finite.unwrap_or(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    if n_degenerate > 0 {
        log::warn!("{n_degenerate} coincident vertex pairs with zero bandwidth; assigned weight {fallback:e}");
    }

    let edges = per_row
        .into_iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.into_iter().map(move |(j, v)| Edge {
                i,
                j,
                w: match v {
                    KernelValue::Finite(w) => w,
                    KernelValue::Degenerate => fallback,
                },
            })
        })
        .collect();
    Ok(SimilarityGraph::from_edges(n, x.cols(), edges, params.clone()))
}
