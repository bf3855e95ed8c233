use serde::{Deserialize, Serialize};

use super::{DataError, FeatureMatrix};

/// Remove columns whose missing fraction is strictly greater than `threshold`.
pub fn drop_sparse_features(fm: &FeatureMatrix, threshold: f64) -> Result<FeatureMatrix, DataError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(DataError::InvalidArgument(format!("missingness threshold {threshold} not in (0, 1]")));
    }
    let n = fm.n_subjects();
    let keep: Vec<usize> = (0..fm.n_features())
        .filter(|&j| {
            let miss = (0..n).filter(|&i| fm.is_missing(i, j)).count();
            n == 0 || (miss as f64 / n as f64) <= threshold
        })
        .collect();
    if keep.is_empty() {
        return Err(DataError::AllColumnsDropped(fm.n_features()));
    }
    Ok(fm.select_columns(&keep))
}

/// Fill each missing cell with the mean of that feature over the `k`
/// nearest rows that observe it.
///
/// Row distance is Euclidean over mutually observed features, rescaled by
/// `F / overlap` so rows with few shared features are not artificially close.
/// Rows sharing no observed feature sit at infinite distance and are only
/// used when nothing closer is available. Ties break toward the lower row
/// index. Donor values always come from the original (unimputed) matrix.
pub fn impute_knn_mean(fm: &FeatureMatrix, k: usize) -> Result<FeatureMatrix, DataError> {
    if k == 0 {
        return Err(DataError::InvalidArgument("k must be at least 1".into()));
    }
    let (n, f) = (fm.n_subjects(), fm.n_features());
    for j in 0..f {
        let any_missing = (0..n).any(|i| fm.is_missing(i, j));
        if any_missing && (0..n).all(|i| fm.is_missing(i, j)) {
            return Err(DataError::CannotImpute(fm.feature_names[j].clone()));
        }
    }
    for i in 0..n {
        if f > 0 && (0..f).all(|j| fm.is_missing(i, j)) {
            return Err(DataError::EmptyRow(i));
        }
    }

    let mut out = fm.clone();
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        if !(0..f).any(|j| fm.is_missing(i, j)) {
            continue;
        }
        let dist: Vec<f64> = (0..n).map(|r| if r == i { f64::INFINITY } else { masked_distance(fm, i, r) }).collect();
        for j in 0..f {
            if !fm.is_missing(i, j) {
                continue;
            }
            candidates.clear();
            candidates.extend((0..n).filter(|&r| r != i && !fm.is_missing(r, j)).map(|r| (dist[r], r)));
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let take = k.min(candidates.len());
            let mean = candidates[..take].iter().map(|&(_, r)| fm.get(r, j)).sum::<f64>() / take as f64;
            out.values[i * f + j] = mean;
            out.missing[i * f + j] = false;
        }
    }
    Ok(out)
}

fn masked_distance(fm: &FeatureMatrix, a: usize, b: usize) -> f64 {
    let f = fm.n_features();
    let mut overlap = 0usize;
    let mut ss = 0.0;
    for j in 0..f {
        if !fm.is_missing(a, j) && !fm.is_missing(b, j) {
            let d = fm.get(a, j) - fm.get(b, j);
            ss += d * d;
            overlap += 1;
        }
    }
    if overlap == 0 {
        f64::INFINITY
    } else {
        (ss * f as f64 / overlap as f64).sqrt()
    }
}

/// Per-column statistics used by [`normalize_unit_variance`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub feature_names: Vec<String>,
    pub mean: Vec<f64>,
    /// Sample standard deviation (divisor N−1).
    pub std: Vec<f64>,
    /// Columns with a single distinct value; mapped to all zeros.
    pub constant: Vec<bool>,
}

/// Z-score every column with its mean and sample standard deviation.
pub fn normalize_unit_variance(fm: &FeatureMatrix) -> Result<(FeatureMatrix, Normalization), DataError> {
    let missing = fm.missing_count();
    if missing > 0 {
        return Err(DataError::NotImputed(missing));
    }
    let (n, f) = (fm.n_subjects(), fm.n_features());
    let mut out = fm.clone();
    let mut stats = Normalization { feature_names: fm.feature_names.clone(), mean: vec![0.0; f], std: vec![0.0; f], constant: vec![false; f] };
    for j in 0..f {
        let col: Vec<f64> = (0..n).map(|i| fm.get(i, j)).collect();
        let constant = col.windows(2).all(|w| w[0] == w[1]);
        let mean = col.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 { (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        stats.mean[j] = mean;
        stats.std[j] = std;
        stats.constant[j] = constant || std == 0.0;
        for (i, c) in col.iter().enumerate() {
            out.values[i * f + j] = if stats.constant[j] { 0.0 } else { (c - mean) / std };
        }
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(cols: usize, values: Vec<f64>) -> FeatureMatrix {
        let n = values.len() / cols;
        let names = (0..cols).map(|j| format!("f{j}")).collect();
        FeatureMatrix::new(names, values, vec![None; n]).unwrap()
    }

    const NA: f64 = f64::NAN;

    #[test]
    fn drops_column_over_threshold() {
        // column 0: 3/5 missing (60%), column 1: complete
        let m = fm(2, vec![NA, 1.0, NA, 2.0, NA, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let out = drop_sparse_features(&m, 0.5).unwrap();
        assert_eq!(out.feature_names, vec!["f1"]);
    }

    #[test]
    fn keeps_column_at_exactly_threshold() {
        let m = fm(2, vec![NA, 1.0, NA, 2.0, 1.0, 3.0, 1.0, 4.0]);
        let out = drop_sparse_features(&m, 0.5).unwrap();
        assert_eq!(out.n_features(), 2);
    }

    #[test]
    fn drop_is_identity_without_missing() {
        let m = fm(2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(drop_sparse_features(&m, 0.5).unwrap(), m);
    }

    #[test]
    fn drop_everything_is_an_error() {
        let m = fm(1, vec![NA, NA, 1.0]);
        assert!(matches!(drop_sparse_features(&m, 0.5), Err(DataError::AllColumnsDropped(1))));
    }

    #[test]
    fn imputes_mean_of_available_donors() {
        // A, B, C identical on feature 0; A missing feature 1; donors give 2 and 4.
        let m = fm(2, vec![1.0, NA, 1.0, 2.0, 1.0, 4.0]);
        let out = impute_knn_mean(&m, 10).unwrap();
        assert_eq!(out.get(0, 1), 3.0);
        assert_eq!(out.missing_count(), 0);
    }

    #[test]
    fn k1_takes_nearest_donor() {
        let m = fm(2, vec![0.0, NA, 0.1, 7.0, 5.0, 100.0]);
        let out = impute_knn_mean(&m, 1).unwrap();
        assert_eq!(out.get(0, 1), 7.0);
    }

    #[test]
    fn impute_is_identity_without_missing() {
        let m = fm(2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(impute_knn_mean(&m, 3).unwrap(), m);
    }

    #[test]
    fn fully_missing_feature_cannot_be_imputed() {
        let m = fm(2, vec![1.0, NA, 2.0, NA]);
        assert!(matches!(impute_knn_mean(&m, 3), Err(DataError::CannotImpute(_))));
    }

    #[test]
    fn normalizes_two_values() {
        let m = fm(1, vec![0.0, 2.0]);
        let (out, stats) = normalize_unit_variance(&m).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out.values[0] + h).abs() < 1e-12);
        assert!((out.values[1] - h).abs() < 1e-12);
        assert!((stats.std[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_column_flagged() {
        let m = fm(1, vec![5.0, 5.0, 5.0]);
        let (out, stats) = normalize_unit_variance(&m).unwrap();
        assert_eq!(out.values, vec![0.0, 0.0, 0.0]);
        assert!(stats.constant[0]);
    }

    #[test]
    fn normalization_is_idempotent() {
        let m = fm(2, vec![1.0, -3.0, 2.5, 0.0, 7.0, 11.0, -4.0, 2.0]);
        let (once, _) = normalize_unit_variance(&m).unwrap();
        let (twice, _) = normalize_unit_variance(&once).unwrap();
        for (a, b) in once.values.iter().zip(&twice.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_requires_imputation() {
        let m = fm(1, vec![1.0, NA]);
        assert!(matches!(normalize_unit_variance(&m), Err(DataError::NotImputed(1))));
    }
}
