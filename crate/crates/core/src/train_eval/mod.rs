//! Full-batch semi-supervised training, AUC evaluation, repeated-split
//! experiments and the labeled-count / depth sweeps.

mod experiment;
mod metrics;

pub use experiment::{run_experiment, sweep_depth, sweep_labels, write_sweep_csv, write_sweep_json, RunResult, SweepRow, SweepTable};
pub use metrics::{auc, mean_stderr};

use std::sync::Arc;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Split};
use crate::models::{GraphContext, Mode, Model, ModelConfig, ModelError};
use crate::numerics::rng::rng_for;
use crate::numerics::{AdamW, NumericsError, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("numeric failure at epoch {epoch}: {source}")]
    Numeric { epoch: usize, source: NumericsError },
    #[error("non-finite parameters after epoch {epoch}")]
    NonFiniteParams { epoch: usize },
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("repetition {repetition}: {source}")]
    Repetition { repetition: usize, source: Box<TrainError> },
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Parameters from the epoch with the highest validation AUC.
    BestVal,
    FinalEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub selection: Selection,
    /// Stop once validation AUC has not improved for this many epochs.
    pub patience: Option<usize>,
    /// Seeds initialization and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 1000, learning_rate: 0.001, weight_decay: 0.01, selection: Selection::BestVal, patience: None, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidArgument("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::InvalidArgument("learning_rate and weight_decay must be finite and non-negative".into()));
        }
        if self.patience == Some(0) {
            return Err(TrainError::InvalidArgument("patience must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_loss: Vec<f64>,
    /// Empty when the validation set cannot be scored.
    pub val_auc: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub history: History,
    /// 0-based epoch whose parameters were kept.
    pub selected_epoch: usize,
}

/// Class labels of `idx`; every entry must be labeled.
fn labels_at(labels: &[Option<u8>], idx: &[usize]) -> Result<Vec<u8>, TrainError> {
    idx.iter()
        .map(|&i| labels.get(i).copied().flatten().ok_or_else(|| TrainError::InvalidArgument(format!("subject {i} is unlabeled or out of range"))))
        .collect()
}

/// Train one model. Cross-entropy on `split.train` only, AdamW updates,
/// validation AUC after every epoch.
///
/// If the validation set is empty or single-class, selection falls back to
/// the final epoch.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    x: &Tensor,
    labels: &[Option<u8>],
    ctx: &GraphContext,
    split: &Split,
) -> Result<Trained, TrainError> {
    train_cfg.validate()?;
    if labels.len() != x.rows() {
        return Err(TrainError::InvalidArgument(format!("{} labels for {} subjects", labels.len(), x.rows())));
    }
    if split.train.is_empty() {
        return Err(TrainError::InvalidArgument("empty training set".into()));
    }
    let rows: Arc<[usize]> = split.train.clone().into();
    let targets: Arc<[usize]> = labels_at(labels, &split.train)?.into_iter().map(usize::from).collect();
    let val_labels = labels_at(labels, &split.val)?;
    let mut selection = train_cfg.selection;
    let val_scored = val_labels.contains(&0) && val_labels.contains(&1);
    if !val_scored && selection == Selection::BestVal {
        warn!("validation set cannot be scored by AUC; keeping final-epoch parameters");
        selection = Selection::FinalEpoch;
    }

    let mut model = Model::new(model_cfg.clone(), x.cols(), train_cfg.seed)?;
    let mut opt = AdamW::new(train_cfg.learning_rate, train_cfg.weight_decay);
    let mut rng = rng_for(train_cfg.seed, "dropout", 0);
    let mut history = History::default();
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 0..train_cfg.epochs {
        let numeric = |source| TrainError::Numeric { epoch, source };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = match model.forward(&mut tape, xv, ctx, Mode::Train(&mut rng), false) {
            Ok(o) => o,
            Err(ModelError::Numerics(e)) => return Err(numeric(e)),
            Err(e) => return Err(e.into()),
        };
        let loss = tape.softmax_cross_entropy(out.logits, rows.clone(), targets.clone()).map_err(numeric)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        let grads = tape.backward(loss).map_err(numeric)?.param_grads(&model.params);
        drop(tape);
        opt.step(&mut model.params, &grads);
        model.apply_bn_updates(&out.bn_updates);
        if !model.params.all_finite() {
            return Err(TrainError::NonFiniteParams { epoch });
        }
        history.train_loss.push(loss_value);

        if val_scored {
            let probs = predict_proba(&model, x, ctx)?;
            let scores: Vec<f64> = split.val.iter().map(|&i| probs[i]).collect();
            let v = auc(&scores, &val_labels)?;
            history.val_auc.push(v);
            debug!("{} epoch {epoch}: loss {loss_value:.5}, val AUC {v:.4}", model_cfg.kind);
            if selection == Selection::BestVal && best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, model.clone()));
            }
            if let (Some(p), Some((_, at, _))) = (train_cfg.patience, &best) {
                if epoch - at >= p {
                    debug!("{}: no validation improvement for {p} epochs, stopping at epoch {epoch}", model_cfg.kind);
                    break;
                }
            }
        }
    }
    let last = history.train_loss.len() - 1;
    Ok(match best {
        Some((_, epoch, m)) => Trained { model: m, history, selected_epoch: epoch },
        None => Trained { model, history, selected_epoch: last },
    })
}

/// Class-1 probability per subject from eval-mode logits.
pub fn predict_proba(model: &Model, x: &Tensor, ctx: &GraphContext) -> Result<Vec<f64>, TrainError> {
    let logits = model.logits(x, ctx)?;
    Ok((0..logits.rows()).map(|i| crate::numerics::stable_sigmoid(logits.get(i, 1) - logits.get(i, 0))).collect())
}
