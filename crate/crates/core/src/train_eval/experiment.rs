use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{auc, labels_at, mean_stderr, predict_proba, train, TrainConfig, TrainError};
use crate::data::{make_splits, SplitSpec};
use crate::models::{GraphContext, ModelConfig};
use crate::numerics::rng::derive_seed;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub model: String,
    /// Test AUC per repetition, in repetition order.
    pub aucs: Vec<f64>,
    pub selected_epochs: Vec<usize>,
    pub mean: f64,
    pub stderr: f64,
    /// Set when only one repetition ran, so `stderr` is a placeholder 0.
    pub stderr_degenerate: bool,
}

impl RunResult {
    pub fn from_aucs(model: impl Into<String>, aucs: Vec<f64>, selected_epochs: Vec<usize>) -> Self {
        let (mean, stderr) = mean_stderr(&aucs);
        let stderr_degenerate = aucs.len() == 1;
        if stderr_degenerate {
            warn!("single repetition: standard error reported as 0");
        }
        Self { model: model.into(), aucs, selected_epochs, mean, stderr, stderr_degenerate }
    }

    /// `"76.18 ± 0.65"`: percent, two decimals.
    pub fn cell(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.stderr)
    }
}

/// `spec.repetitions` independent train/test runs. Repetition `r` uses split
/// `make_splits(.., r)` and training seed `derive_seed(train.seed, "train", r)`;
/// repetitions run in parallel but results are gathered in index order.
pub fn run_experiment(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    x: &Tensor,
    labels: &[Option<u8>],
    ctx: &GraphContext,
    spec: &SplitSpec,
) -> Result<RunResult, TrainError> {
    let one = |rep: usize| -> Result<(f64, usize), TrainError> {
        let split = make_splits(labels, spec, rep)?;
        let cfg = TrainConfig { seed: derive_seed(train_cfg.seed, "train", rep as u64), ..train_cfg.clone() };
        let trained = train(model_cfg, &cfg, x, labels, ctx, &split)?;
        let probs = predict_proba(&trained.model, x, ctx)?;
        let scores: Vec<f64> = split.test.iter().map(|&i| probs[i]).collect();
        Ok((auc(&scores, &labels_at(labels, &split.test)?)?, trained.selected_epoch))
    };
    let results: Vec<Result<(f64, usize), TrainError>> = (0..spec.repetitions).into_par_iter().map(one).collect();
    let mut aucs = Vec::with_capacity(results.len());
    let mut epochs = Vec::with_capacity(results.len());
    for (rep, r) in results.into_iter().enumerate() {
        let (a, e) = r.map_err(|source| TrainError::Repetition { repetition: rep, source: Box::new(source) })?;
        aucs.push(a);
        epochs.push(e);
    }
    Ok(RunResult::from_aucs(model_cfg.kind.name(), aucs, epochs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    /// Index into `models` of the highest mean (first on ties).
    pub best: usize,
    pub cells: Vec<RunResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    /// Name of the swept quantity, e.g. `labeled_per_class` or `depth`.
    pub axis: String,
    pub models: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    fn from_grid(axis: &str, models: &[ModelConfig], values: &[usize], grid: Vec<Vec<RunResult>>) -> Self {
        let rows = values
            .iter()
            .zip(grid)
            .map(|(&value, cells)| {
                let best = cells.iter().enumerate().fold(0, |b, (i, c)| if c.mean > cells[b].mean { i } else { b });
                SweepRow { value, best, cells }
            })
            .collect();
        Self { axis: axis.into(), models: models.iter().map(|m| m.kind.name().to_string()).collect(), rows }
    }

    pub fn cell(&self, value: usize, model: &str) -> Option<&RunResult> {
        let col = self.models.iter().position(|m| m == model)?;
        self.rows.iter().find(|r| r.value == value).map(|r| &r.cells[col])
    }

    /// Header `axis,<models...>,best`; cells `"mean ± stderr"` in percent.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.axis);
        for m in &self.models {
            out.push(',');
            out.push_str(m);
        }
        out.push_str(",best\n");
        for row in &self.rows {
            out.push_str(&row.value.to_string());
            for c in &row.cells {
                out.push(',');
                out.push_str(&c.cell());
            }
            out.push(',');
            out.push_str(&self.models[row.best]);
            out.push('\n');
        }
        out
    }
}

/// One `run_experiment` per (ℓ, model); the split seed is shared, so every
/// model sees the same splits at a given ℓ.
pub fn sweep_labels(
    models: &[ModelConfig],
    ells: &[usize],
    train_cfg: &TrainConfig,
    x: &Tensor,
    labels: &[Option<u8>],
    ctx: &GraphContext,
    spec: &SplitSpec,
) -> Result<SweepTable, TrainError> {
    check_grid(models, ells)?;
    let mut grid = Vec::with_capacity(ells.len());
    for &ell in ells {
        let s = SplitSpec { labeled_per_class: ell, ..spec.clone() };
        let row = models.iter().map(|m| run_experiment(m, train_cfg, x, labels, ctx, &s)).collect::<Result<Vec<_>, _>>()?;
        grid.push(row);
    }
    Ok(SweepTable::from_grid("labeled_per_class", models, ells, grid))
}

/// Depth grid at the fixed ℓ in `spec`. LR has no depth and repeats its
/// single-layer result on every row.
pub fn sweep_depth(
    models: &[ModelConfig],
    depths: &[usize],
    train_cfg: &TrainConfig,
    x: &Tensor,
    labels: &[Option<u8>],
    ctx: &GraphContext,
    spec: &SplitSpec,
) -> Result<SweepTable, TrainError> {
    check_grid(models, depths)?;
    let mut grid = Vec::with_capacity(depths.len());
    for &depth in depths {
        let row = models
            .iter()
            .map(|m| run_experiment(&ModelConfig { depth, ..m.clone() }, train_cfg, x, labels, ctx, spec))
            .collect::<Result<Vec<_>, _>>()?;
        grid.push(row);
    }
    Ok(SweepTable::from_grid("depth", models, depths, grid))
}

fn check_grid(models: &[ModelConfig], values: &[usize]) -> Result<(), TrainError> {
    if models.is_empty() || values.is_empty() {
        return Err(TrainError::InvalidArgument("sweep needs at least one model and one value".into()));
    }
    Ok(())
}

pub fn write_sweep_csv(table: &SweepTable, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    fs::write(path, table.to_csv()).map_err(|e| TrainError::Io { path: path.display().to_string(), msg: e.to_string() })
}

pub fn write_sweep_json(table: &SweepTable, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    let io = |msg: String| TrainError::Io { path: path.display().to_string(), msg };
    let text = serde_json::to_string_pretty(table).map_err(|e| io(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io(e.to_string()))
}
