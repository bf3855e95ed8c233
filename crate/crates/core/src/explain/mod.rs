//! Per-subject feature-mask explanations.
//!
//! A mask `m = σ(θ) ∈ (0,1)^F` is shared by every subject's features, so the
//! target sees masked neighbours as well as its own masked row. With model
//! parameters frozen, `θ` minimizes
//!
//! ```text
//! CE(f(X ⊙ m)_t, ŷ_t) + λ_size · mean(m) + λ_ent · mean(H(m))
//! ```
//!
//! where `ŷ_t` is the unmasked prediction at target `t` and `H` is the binary
//! entropy. The final mask values are the importance scores.

mod cluster;

pub use cluster::{order_heatmap, upgma_order};

use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::models::{GraphContext, Mode, Model, ModelError};
use crate::numerics::rng::rng_for;
use crate::numerics::{AdamW, NumericsError, ParamStore, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("explanation for subject {target} diverged at epoch {epoch}")]
    NonFinite { target: usize, epoch: usize },
    #[error("target {target} out of range for {n} subjects")]
    InvalidTarget { target: usize, n: usize },
    #[error("no targets to explain{0}")]
    NoTargets(&'static str),
    #[error("invalid explanation parameters: {0}")]
    InvalidParams(String),
    #[error("{0}")]
    Shape(String),
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda_size: f64,
    pub lambda_ent: f64,
    /// Standard deviation of the centred Gaussian used to initialize logits.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ExplainParams {
    fn default() -> Self {
        Self { epochs: 200, learning_rate: 0.01, lambda_size: 0.1, lambda_ent: 0.1, init_std: 0.1, seed: 0 }
    }
}

impl ExplainParams {
    pub fn validate(&self) -> Result<(), ExplainError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if self.epochs == 0 {
            return Err(ExplainError::InvalidParams("epochs must be at least 1".into()));
        }
        if !(ok(self.learning_rate) && ok(self.lambda_size) && ok(self.lambda_ent) && ok(self.init_std)) {
            return Err(ExplainError::InvalidParams("rates, penalties and init_std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub target: usize,
    /// Class predicted for the target without a mask; the objective keeps it.
    pub predicted: u8,
    pub logits: Vec<f64>,
    /// `σ(logits)`, the importance score per feature.
    pub mask: Vec<f64>,
    /// Objective before each update, then once more after the last one.
    pub objective: Vec<f64>,
    /// Last update changed the objective by at most `1e-6` (relative).
    pub converged: bool,
}

impl FeatureMask {
    pub fn final_objective(&self) -> f64 {
        *self.objective.last().expect("objective history is never empty")
    }
}

/// Class predicted per subject (class 1 when its logit is strictly larger).
pub fn predicted_classes(model: &Model, x: &Tensor, ctx: &GraphContext) -> Result<Vec<u8>, ExplainError> {
    let logits = model.logits(x, ctx)?;
    Ok((0..logits.rows()).map(|i| u8::from(logits.get(i, 1) > logits.get(i, 0))).collect())
}

/// Objective value at mask logits `theta`, recorded on `tape`. Returns the
/// objective var and the logits var.
#[allow(clippy::too_many_arguments)]
fn objective(
    tape: &mut Tape,
    store: &ParamStore,
    model: &Model,
    x: &Tensor,
    ctx: &GraphContext,
    target: usize,
    class: u8,
    hp: &ExplainParams,
) -> Result<crate::numerics::Var, ExplainError> {
    let id = store.find("mask.logits").expect("mask store");
    let theta = tape.param(store, id);
    let m = tape.sigmoid(theta)?;
    let xv = tape.constant(x.clone());
    let xm = tape.mul(xv, m)?;
    let out = model.forward(tape, xm, ctx, Mode::Eval, true)?;
    let rows: Arc<[usize]> = vec![target].into();
    let cls: Arc<[usize]> = vec![usize::from(class)].into();
    let ce = tape.softmax_cross_entropy(out.logits, rows, cls)?;
    let size = tape.mean(m)?;
    // H(σ(θ)) = softplus(θ) − θ·σ(θ)
    let sp = tape.softplus(theta)?;
    let tm = tape.mul(theta, m)?;
    let h = tape.sub(sp, tm)?;
    let ent = tape.mean(h)?;
    let size = tape.scale(size, hp.lambda_size)?;
    let ent = tape.scale(ent, hp.lambda_ent)?;
    let reg = tape.add(size, ent)?;
    Ok(tape.add(ce, reg)?)
}

/// Optimize the feature mask of one target. The model's unmasked
/// prediction `class` must be supplied (see [`predicted_classes`]).
pub fn explain_node_with_class(
    model: &Model,
    x: &Tensor,
    ctx: &GraphContext,
    target: usize,
    class: u8,
    hp: &ExplainParams,
) -> Result<FeatureMask, ExplainError> {
    hp.validate()?;
    if target >= x.rows() {
        return Err(ExplainError::InvalidTarget { target, n: x.rows() });
    }
    let f = x.cols();
    let mut rng = rng_for(hp.seed, "explain", target as u64);
    let normal = Normal::new(0.0, hp.init_std).map_err(|e| ExplainError::InvalidParams(e.to_string()))?;
    let init: Vec<f64> = (0..f).map(|_| normal.sample(&mut rng)).collect();
    let mut store = ParamStore::new();
    let id = store.add("mask.logits", Tensor::row(init));
    let mut opt = AdamW::new(hp.learning_rate, 0.0);
    let mut history = Vec::with_capacity(hp.epochs + 1);

    for epoch in 0..=hp.epochs {
        let mut tape = Tape::new().with_finite_check(false);
        let obj = objective(&mut tape, &store, model, x, ctx, target, class, hp)?;
        let value = tape.value(obj).item();
        if !value.is_finite() {
            return Err(ExplainError::NonFinite { target, epoch });
        }
        history.push(value);
        if epoch == hp.epochs {
            break;
        }
        let grads = tape.backward(obj)?.param_grads(&store);
        opt.step(&mut store, &grads);
        if !store.all_finite() {
            return Err(ExplainError::NonFinite { target, epoch });
        }
    }
    let logits = store.value(id).data().to_vec();
    let mask = logits.iter().map(|&t| crate::numerics::stable_sigmoid(t)).collect();
    let n = history.len();
    let converged = n >= 2 && (history[n - 1] - history[n - 2]).abs() <= 1e-6 * history[n - 2].abs().max(1.0);
    Ok(FeatureMask { target, predicted: class, logits, mask, objective: history, converged })
}

/// Optimize the feature mask of one target against the model's own prediction.
pub fn explain_node(model: &Model, x: &Tensor, ctx: &GraphContext, target: usize, hp: &ExplainParams) -> Result<FeatureMask, ExplainError> {
    if target >= x.rows() {
        return Err(ExplainError::InvalidTarget { target, n: x.rows() });
    }
    let class = predicted_classes(model, x, ctx)?[target];
    explain_node_with_class(model, x, ctx, target, class, hp)
}

/// Features × explained subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMatrix {
    pub feature_names: Vec<String>,
    pub targets: Vec<usize>,
    /// Row-major `features × targets`.
    pub values: Vec<f64>,
    pub row_order: Vec<usize>,
    pub col_order: Vec<usize>,
    pub correct_only: bool,
    /// Targets removed by the correctness filter, in input order.
    pub dropped: Vec<usize>,
}

impl ExplanationMatrix {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn get(&self, feature: usize, column: usize) -> f64 {
        self.values[feature * self.n_targets() + column]
    }

    pub fn column(&self, column: usize) -> Vec<f64> {
        (0..self.n_features()).map(|r| self.get(r, column)).collect()
    }

    /// Header `feature,<target ids>`; rows in original feature order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature");
        for t in &self.targets {
            out.push(',');
            out.push_str(&t.to_string());
        }
        out.push('\n');
        for (r, name) in self.feature_names.iter().enumerate() {
            out.push_str(&csv_field(name));
            for c in 0..self.n_targets() {
                out.push(',');
                out.push_str(&format!("{}", self.get(r, c)));
            }
            out.push('\n');
        }
        out
    }

    /// CSV of the values plus a JSON sidecar with display orders.
    pub fn write(&self, csv_path: impl AsRef<Path>, order_path: impl AsRef<Path>) -> Result<(), ExplainError> {
        write_text(csv_path.as_ref(), &self.to_csv())?;
        let sidecar = OrderSidecar {
            row_order: self.row_order.clone(),
            col_order: self.col_order.clone(),
            targets: self.targets.clone(),
            correct_only: self.correct_only,
            dropped: self.dropped.clone(),
        };
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| io_err(order_path.as_ref(), e))?;
        write_text(order_path.as_ref(), &(text + "\n"))
    }

    /// Inverse of [`ExplanationMatrix::write`].
    pub fn read(csv_path: impl AsRef<Path>, order_path: impl AsRef<Path>) -> Result<Self, ExplainError> {
        let csv_path = csv_path.as_ref();
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(csv_path).map_err(|e| io_err(csv_path, e))?;
        let header = rdr.headers().map_err(|e| io_err(csv_path, e))?.clone();
        let targets = header
            .iter()
            .skip(1)
            .map(|h| h.parse::<usize>().map_err(|e| ExplainError::Shape(format!("{}: bad target id {h:?}: {e}", csv_path.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        let mut feature_names = Vec::new();
        let mut values = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| io_err(csv_path, e))?;
            feature_names.push(rec.get(0).unwrap_or_default().to_string());
            for v in rec.iter().skip(1) {
                values.push(v.parse::<f64>().map_err(|e| ExplainError::Shape(format!("{}: bad value {v:?}: {e}", csv_path.display())))?);
            }
        }
        if values.len() != feature_names.len() * targets.len() {
            return Err(ExplainError::Shape(format!("{}: ragged matrix", csv_path.display())));
        }
        let order_path = order_path.as_ref();
        let text = fs::read_to_string(order_path).map_err(|e| io_err(order_path, e))?;
        let side: OrderSidecar = serde_json::from_str(&text).map_err(|e| io_err(order_path, e))?;
        if side.targets != targets || !is_permutation(&side.row_order, feature_names.len()) || !is_permutation(&side.col_order, targets.len()) {
            return Err(ExplainError::Shape(format!("{} does not match {}", order_path.display(), csv_path.display())));
        }
        Ok(Self { feature_names, targets, values, row_order: side.row_order, col_order: side.col_order, correct_only: side.correct_only, dropped: side.dropped })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OrderSidecar {
    row_order: Vec<usize>,
    col_order: Vec<usize>,
    targets: Vec<usize>,
    correct_only: bool,
    dropped: Vec<usize>,
}

fn is_permutation(order: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    order.len() == n && order.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExplainError {
    ExplainError::Io { path: path.display().to_string(), msg: e.to_string() }
}

fn write_text(path: &Path, text: &str) -> Result<(), ExplainError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Explain every target (in parallel) and assemble the matrix. With
/// `correct_only`, targets whose prediction differs from their label, or
/// that have no label, are dropped first.
#[allow(clippy::too_many_arguments)]
pub fn explain_cohort(
    model: &Model,
    x: &Tensor,
    labels: &[Option<u8>],
    feature_names: &[String],
    ctx: &GraphContext,
    targets: &[usize],
    hp: &ExplainParams,
    correct_only: bool,
) -> Result<ExplanationMatrix, ExplainError> {
    hp.validate()?;
    if targets.is_empty() {
        return Err(ExplainError::NoTargets(""));
    }
    if feature_names.len() != x.cols() {
        return Err(ExplainError::Shape(format!("{} feature names for {} columns", feature_names.len(), x.cols())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= x.rows()) {
        return Err(ExplainError::InvalidTarget { target: t, n: x.rows() });
    }
    let predicted = predicted_classes(model, x, ctx)?;
    let (kept, dropped): (Vec<usize>, Vec<usize>) = if correct_only {
        targets.iter().partition(|&&t| labels.get(t).copied().flatten() == Some(predicted[t]))
    } else {
        (targets.to_vec(), Vec::new())
    };
    if !dropped.is_empty() {
        warn!("correctness filter dropped {} of {} targets", dropped.len(), targets.len());
    }
    if kept.is_empty() {
        return Err(ExplainError::NoTargets(" after the correctness filter"));
    }
    let masks = kept
        .par_iter()
        .map(|&t| explain_node_with_class(model, x, ctx, t, predicted[t], hp))
        .collect::<Result<Vec<_>, _>>()?;
    let (f, m) = (x.cols(), kept.len());
    let mut values = vec![0.0; f * m];
    for (c, mask) in masks.iter().enumerate() {
        for (r, &v) in mask.mask.iter().enumerate() {
            values[r * m + c] = v;
        }
    }
    let (row_order, col_order) = order_heatmap(&values, f, m);
    Ok(ExplanationMatrix { feature_names: feature_names.to_vec(), targets: kept, values, row_order, col_order, correct_only, dropped })
}
