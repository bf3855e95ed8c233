//! Tabular cohorts: CSV ingestion, missing-data handling, scaling,
//! synthetic cohort generation and labeled/validation/test splits.

mod impute;
mod io;
mod split;
mod synth;

pub use impute::{drop_sparse_features, impute_knn_mean, normalize_unit_variance, Normalization};
pub use io::{load_csv, read_csv, write_csv, CsvOptions};
pub use split::{make_splits, Split, SplitSpec};
pub use synth::{generate_synthetic, inject_missing, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(String),
    #[error("cannot parse cell at row {row}, column '{column}': {value:?}")]
    Parse { row: usize, column: String, value: String },
    #[error("duplicate column name '{0}'")]
    DuplicateColumn(String),
    #[error("label column '{0}' not found in header")]
    MissingLabelColumn(String),
    #[error("invalid label at row {row}: {value:?} (expected 0, 1 or empty)")]
    InvalidLabel { row: usize, value: String },
    #[error("all {0} feature columns exceed the missingness threshold")]
    AllColumnsDropped(usize),
    #[error("feature '{0}' is missing in every row and cannot be imputed")]
    CannotImpute(String),
    #[error("row {0} has no observed features")]
    EmptyRow(usize),
    #[error("matrix still has {0} missing cells; impute before normalizing")]
    NotImputed(usize),
    #[error("class {class} has {have} labeled subjects, {needed} required")]
    InsufficientClass { class: u8, needed: usize, have: usize },
    #[error("{have} labeled subjects remain after training draw, validation+test need {needed}")]
    InsufficientRemainder { needed: usize, have: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Dense subject × feature matrix with a missingness mask and optional
/// binary labels. Missing cells hold `NaN` in `values`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub feature_names: Vec<String>,
    /// Row-major `n_subjects × n_features`.
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
    pub labels: Vec<Option<u8>>,
    pub label_name: String,
}

impl FeatureMatrix {
    pub fn new(feature_names: Vec<String>, values: Vec<f64>, labels: Vec<Option<u8>>) -> Result<Self, DataError> {
        let f = feature_names.len();
        if values.len() != f * labels.len() {
            return Err(DataError::InvalidArgument(format!(
                "{} values for {} subjects x {} features",
                values.len(),
                labels.len(),
                f
            )));
        }
        check_unique(&feature_names)?;
        let missing = values.iter().map(|v| v.is_nan()).collect();
        Ok(Self { feature_names, values, missing, labels, label_name: "label".into() })
    }

    pub fn n_subjects(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_features() + j]
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.missing[i * self.n_features() + j]
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.n_features();
        &self.values[i * f..(i + 1) * f]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.n_subjects(), self.n_features(), self.values.clone()).expect("consistent dims")
    }

    /// Keep only the listed columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> FeatureMatrix {
        let f = self.n_features();
        let mut values = Vec::with_capacity(cols.len() * self.n_subjects());
        let mut missing = Vec::with_capacity(values.capacity());
        for i in 0..self.n_subjects() {
            for &j in cols {
                values.push(self.values[i * f + j]);
                missing.push(self.missing[i * f + j]);
            }
        }
        FeatureMatrix {
            feature_names: cols.iter().map(|&j| self.feature_names[j].clone()).collect(),
            values,
            missing,
            labels: self.labels.clone(),
            label_name: self.label_name.clone(),
        }
    }

    /// Indices of labeled subjects with the given class.
    pub fn class_members(&self, class: u8) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, l)| **l == Some(class)).map(|(i, _)| i).collect()
    }
}

fn check_unique(names: &[String]) -> Result<(), DataError> {
    let mut seen = std::collections::HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(DataError::DuplicateColumn(n.clone()));
        }
    }
    Ok(())
}
