//! Average-linkage (UPGMA) clustering for heatmap display order.

/// Leaf order of an average-linkage dendrogram over `points` (Euclidean).
///
/// At each step the closest pair of clusters merges; ties go to the pair
/// whose smallest original indices are lowest. A merged cluster lists the
/// child holding the lower original index first.
pub fn upgma_order(points: &[Vec<f64>]) -> Vec<usize> {
    let n = points.len();
    if n <= 1 {
        return (0..n).collect();
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    // Cluster slot = its smallest member index.
    let mut leaves: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut active: Vec<usize> = (0..n).collect();
    while active.len() > 1 {
        let mut best = (f64::INFINITY, active[0], active[1]);
        for (p, &a) in active.iter().enumerate() {
            for &b in &active[p + 1..] {
                let d = dist[a * n + b];
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        let (_, a, b) = best;
        let right = leaves[b].take().expect("active cluster");
        let left = leaves[a].as_mut().expect("active cluster");
        let (sa, sb) = (left.len() as f64, right.len() as f64);
        left.extend(right);
        active.retain(|&k| k != b);
        for &k in &active {
            if k != a {
                let d = (sa * dist[a * n + k] + sb * dist[b * n + k]) / (sa + sb);
                dist[a * n + k] = d;
                dist[k * n + a] = d;
            }
        }
    }
    leaves[active[0]].take().expect("root cluster")
}

/// Independent row and column orders of a row-major `rows × cols` matrix.
pub fn order_heatmap(values: &[f64], rows: usize, cols: usize) -> (Vec<usize>, Vec<usize>) {
    let row_pts: Vec<Vec<f64>> = (0..rows).map(|r| values[r * cols..(r + 1) * cols].to_vec()).collect();
    let col_pts: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| values[r * cols + c]).collect()).collect();
    (upgma_order(&row_pts), upgma_order(&col_pts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_sizes() {
        assert_eq!(upgma_order(&[]), Vec::<usize>::new());
        assert_eq!(order_heatmap(&[0.4], 1, 1), (vec![0], vec![0]));
    }

    #[test]
    fn separated_clusters_are_contiguous() {
        let pts: Vec<Vec<f64>> = [0.0, 10.0, 0.1, 10.2, 0.05, 9.9].iter().map(|&v| vec![v]).collect();
        let order = upgma_order(&pts);
        let pos = |i: usize| order.iter().position(|&o| o == i).unwrap();
        let low = [0, 2, 4].map(pos);
        let high = [1, 3, 5].map(pos);
        assert!(low.iter().max().unwrap() < high.iter().min().unwrap());
        assert_eq!(order[0], 0);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let pts = vec![vec![1.0]; 4];
        assert_eq!(upgma_order(&pts), vec![0, 1, 2, 3]);
    }

    #[test]
    fn average_linkage_not_single() {
        // {2,3} merge first. Point 0 is 0.95 from point 3 (single linkage
        // would attach it there) but 1.4 from {2,3} on average, farther than
        // its 1.15 to point 1.
        let pts: Vec<Vec<f64>> = [1.85, 3.0, 0.0, 0.9].iter().map(|&v| vec![v]).collect();
        assert_eq!(upgma_order(&pts), vec![0, 1, 2, 3]);
    }
}
