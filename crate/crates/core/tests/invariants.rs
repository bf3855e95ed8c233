//! Property tests over the public API.

use std::collections::HashSet;
use std::sync::Arc;

use proptest::prelude::*;
use simgnn::data::{make_splits, read_csv, write_csv, CsvOptions, FeatureMatrix, SplitSpec};
use simgnn::explain::{order_heatmap, upgma_order};
use simgnn::graph::{build_graph, sym_normalize, KernelParams};
use simgnn::numerics::Tape;
use simgnn::train_eval::{auc, mean_stderr};
use simgnn::Tensor;

/// Scores paired with labels, both classes present.
fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..40).prop_flat_map(|n| {
        (prop::collection::vec(0u8..8, n), prop::collection::vec(0u8..2, n)).prop_map(|(s, mut l)| {
            l[0] = 0;
            l[1] = 1;
            (s.into_iter().map(|v| v as f64 * 0.5 - 1.0).collect(), l)
        })
    })
}

fn pair_count(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &a) in labels.iter().enumerate() {
        for (j, &b) in labels.iter().enumerate() {
            if a == 1 && b == 0 {
                pairs += 1;
                twice += if scores[i] > scores[j] { 2 } else if scores[i] == scores[j] { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn points(max_n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, dim), 1..max_n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_matches_pair_counting((scores, labels) in scored()) {
        prop_assert_eq!(auc(&scores, &labels).unwrap(), pair_count(&scores, &labels));
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps((scores, labels) in scored(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = auc(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        prop_assert_eq!(auc(&affine, &labels).unwrap(), base);
        prop_assert_eq!(auc(&exp, &labels).unwrap(), base);
    }

    #[test]
    fn auc_complement((scores, labels) in scored()) {
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let base = auc(&scores, &labels).unwrap();
        prop_assert!((auc(&scores, &flipped).unwrap() - (1.0 - base)).abs() < 1e-12);
        prop_assert_eq!(auc(&neg, &flipped).unwrap(), base);
    }

    #[test]
    fn stderr_is_nonnegative_and_mean_bounded(v in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let (m, se) = mean_stderr(&v);
        prop_assert!(se >= 0.0);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut state = seed;
        let x = Tensor::from_fn(rows, cols, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 200.0
        });
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let p = tape.row_softmax(xv).unwrap();
        let p = tape.value(p);
        for r in 0..rows {
            let row = p.row_slice(r);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_softmax_sums_to_one_per_segment(sizes in prop::collection::vec(1usize..5, 1..6), scale in 0.1f64..50.0) {
        let mut offsets = vec![0];
        for s in &sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let e = *offsets.last().unwrap();
        let x = Tensor::column((0..e).map(|i| ((i * 7 % 5) as f64 - 2.0) * scale).collect());
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let p = tape.segment_softmax(xv, Arc::from(offsets.clone())).unwrap();
        let p = tape.value(p).data().to_vec();
        for w in offsets.windows(2) {
            prop_assert!((p[w[0]..w[1]].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_graph_is_symmetric_and_thresholded(pts in points(30, 3), mu in 0.1f64..1.0, k in 1usize..8) {
        let n = pts.len();
        let x = Tensor::from_fn(n, 3, |i, j| pts[i][j]);
        let g = build_graph(&x, &KernelParams { mu, k_neighbors: k, ..Default::default() }).unwrap();
        let mut seen = HashSet::new();
        let mut degree = vec![0.0; n];
        for e in &g.edges {
            prop_assert!(e.i < e.j && e.j < n);
            prop_assert!(e.w > 1e-9 && e.w.is_finite());
            prop_assert!(seen.insert((e.i, e.j)));
            degree[e.i] += e.w;
            degree[e.j] += e.w;
        }
        for (d, want) in g.degree.iter().zip(&degree) {
            prop_assert!((d - want).abs() <= 1e-12 * want.abs().max(1e-300));
        }
        let a = sym_normalize(&g);
        for e in &g.edges {
            prop_assert_eq!(a.get(e.i, e.j).to_bits(), a.get(e.j, e.i).to_bits());
        }
    }

    #[test]
    fn splits_are_disjoint_and_balanced(n in 40usize..120, ell in 1usize..6, rep in 0usize..5, seed in any::<u64>()) {
        let labels: Vec<Option<u8>> = (0..n).map(|i| if i % 11 == 0 { None } else { Some((i % 2) as u8) }).collect();
        let spec = SplitSpec { labeled_per_class: ell, val_size: 10, test_size: 15, repetitions: 5, seed };
        let s = make_splits(&labels, &spec, rep).unwrap();
        prop_assert_eq!(&s, &make_splits(&labels, &spec, rep).unwrap());
        let all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        let set: HashSet<usize> = all.iter().copied().collect();
        prop_assert_eq!(set.len(), all.len());
        prop_assert!(all.iter().all(|&i| labels[i].is_some()));
        for c in [0u8, 1] {
            prop_assert_eq!(s.train.iter().filter(|&&i| labels[i] == Some(c)).count(), ell);
        }
        prop_assert_eq!((s.val.len(), s.test.len()), (10, 15));
    }

    #[test]
    fn upgma_order_is_a_deterministic_permutation(pts in points(25, 2)) {
        let order = upgma_order(&pts);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..pts.len()).collect::<Vec<_>>());
        prop_assert_eq!(order, upgma_order(&pts));
    }

    #[test]
    fn heatmap_orders_are_permutations(rows in 1usize..8, cols in 1usize..8, seed in 0u64..1000) {
        let values: Vec<f64> = (0..rows * cols).map(|i| ((i as u64 * 2654435761 + seed) % 97) as f64 / 97.0).collect();
        let (r, c) = order_heatmap(&values, rows, cols);
        let mut r2 = r.clone();
        r2.sort_unstable();
        let mut c2 = c.clone();
        c2.sort_unstable();
        prop_assert_eq!(r2, (0..rows).collect::<Vec<_>>());
        prop_assert_eq!(c2, (0..cols).collect::<Vec<_>>());
    }

    #[test]
    fn csv_round_trip_preserves_values_and_missing(n in 1usize..12, f in 1usize..5, seed in any::<u64>()) {
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            state >> 11
        };
        let values: Vec<f64> = (0..n * f).map(|_| {
            let r = next();
            if r % 7 == 0 { f64::NAN } else { (r as f64 / (1u64 << 53) as f64 - 0.5) * 1e3 }
        }).collect();
        let labels: Vec<Option<u8>> = (0..n).map(|_| match next() % 3 { 0 => None, 1 => Some(0), _ => Some(1) }).collect();
        let names: Vec<String> = (0..f).map(|j| format!("f{j}")).collect();
        let fm = FeatureMatrix::new(names, values, labels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_csv(&fm, &path, "NA").unwrap();
        let back = read_csv(std::fs::File::open(&path).unwrap(), &CsvOptions { missing_token: "NA".into(), ..Default::default() }).unwrap();
        prop_assert_eq!(&back.feature_names, &fm.feature_names);
        prop_assert_eq!(&back.labels, &fm.labels);
        for i in 0..n {
            for j in 0..f {
                prop_assert_eq!(back.is_missing(i, j), fm.is_missing(i, j));
                if !fm.is_missing(i, j) {
                    prop_assert_eq!(back.get(i, j).to_bits(), fm.get(i, j).to_bits());
                }
            }
        }
    }
}
