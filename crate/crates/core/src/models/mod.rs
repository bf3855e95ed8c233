//! Node classifiers producing two logits per subject: logistic regression,
//! MLP, GCN, GAT, and the diffusion transformers DIFFormer-s and
//! DIFFormer-attn.
//!
//! Graph-based kinds share one layout: an input projection to `hidden`
//! (affine, batch-norm, relu, dropout), `depth` kind-specific layers and an
//! affine classifier. Attention heads have width `hidden / heads` and are
//! concatenated back to `hidden`.
//!
//! A hidden layer ends with batch-norm, relu and dropout. DIFFormer layers
//! skip the relu: `Z ← dropout(BN(α·Z + (1 − α)·P̄))`.

mod checkpoint;
mod context;
pub mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use context::GraphContext;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::rng::rng_for;
use crate::numerics::{BatchStats, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};
use layers::{GraphTerm, HeadVars};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept by running batch-norm statistics at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("graph has {graph} vertices but the feature matrix has {data} rows")]
    GraphMismatch { graph: usize, data: usize },
    #[error("model expects {expected} input features, got {got}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "GCN")]
    Gcn,
    #[serde(rename = "GAT")]
    Gat,
    #[serde(rename = "DIFFormer-s")]
    DifformerS,
    #[serde(rename = "DIFFormer-attn")]
    DifformerAttn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] =
        [ModelKind::Lr, ModelKind::Mlp, ModelKind::Gcn, ModelKind::Gat, ModelKind::DifformerS, ModelKind::DifformerAttn];

    pub fn is_diffusion(self) -> bool {
        matches!(self, ModelKind::DifformerS | ModelKind::DifformerAttn)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lr => "LR",
            ModelKind::Mlp => "MLP",
            ModelKind::Gcn => "GCN",
            ModelKind::Gat => "GAT",
            ModelKind::DifformerS => "DIFFormer-s",
            ModelKind::DifformerAttn => "DIFFormer-attn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    /// Case-insensitive; `_` and `-` are interchangeable.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().to_ascii_lowercase() == key)
            .ok_or_else(|| ModelError::Config(format!("unknown model kind '{s}' (expected one of LR, MLP, GCN, GAT, DIFFormer-s, DIFFormer-attn)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub residual_alpha: f64,
    pub dropout: f64,
    /// DIFFormer-s: add the fixed normalized-adjacency term. DIFFormer-attn:
    /// include the edge-attention term. Ignored by other kinds.
    pub use_graph: bool,
    /// Count neighbours instead of summing weights in `D`.
    pub binary_degree: bool,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            depth: 2,
            hidden: 64,
            heads: 4,
            residual_alpha: 0.8,
            dropout: 0.5,
            use_graph: kind != ModelKind::DifformerS,
            binary_degree: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.hidden == 0 || self.heads == 0 {
            return bad("hidden and heads must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if !(0.0..=1.0).contains(&self.residual_alpha) {
            return bad(format!("residual_alpha {} outside [0, 1]", self.residual_alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct HeadIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    attn: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug, PartialEq)]
enum LayerIds {
    Dense { w: ParamId, b: ParamId, bn: BnIds },
    Gcn { w: ParamId, b: ParamId, bn: BnIds },
    Gat { heads: Vec<(ParamId, ParamId)>, bn: BnIds },
    Diffusion { heads: Vec<HeadIds>, bn: BnIds },
}

/// Batch statistics to fold into running estimates after a train step.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats,
}

pub enum Mode<'a> {
    /// Dropout active, batch-norm on batch statistics.
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub struct Forward {
    pub logits: Var,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub in_features: usize,
    pub params: ParamStore,
    input: Option<(ParamId, ParamId, BnIds)>,
    layers: Vec<LayerIds>,
    classifier: (ParamId, ParamId),
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..=limit))
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let w = glorot(&mut self.rng, fan_in, fan_out);
        self.store.add(name, w)
    }

    fn bias(&mut self, name: String, width: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(&[1, width]))
    }

    fn bn(&mut self, prefix: &str, width: usize) -> BnIds {
        BnIds {
            gamma: self.store.add(format!("{prefix}.bn.gamma"), Tensor::ones(&[1, width])),
            beta: self.store.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[1, width])),
            mean: self.store.add_buffer(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[1, width])),
            var: self.store.add_buffer(format!("{prefix}.bn.running_var"), Tensor::ones(&[1, width])),
        }
    }
}

impl Model {
    /// Glorot-uniform weights, zero biases, unit batch-norm scale.
    pub fn new(config: ModelConfig, in_features: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if in_features == 0 {
            return Err(ModelError::Config("model needs at least one input feature".into()));
        }
        let mut b = Builder { store: ParamStore::new(), rng: rng_for(seed, "init", 0) };
        let h = config.hidden;
        let dh = config.head_dim();
        let mut input = None;
        let mut layers = Vec::new();
        let classifier_in = match config.kind {
            ModelKind::Lr => in_features,
            ModelKind::Mlp => {
                for l in 0..config.depth {
                    let fan_in = if l == 0 { in_features } else { h };
                    let p = format!("layer{l}");
                    let w = b.weight(format!("{p}.weight"), fan_in, h);
                    let bias = b.bias(format!("{p}.bias"), h);
                    layers.push(LayerIds::Dense { w, b: bias, bn: b.bn(&p, h) });
                }
                h
            }
            kind => {
                let w = b.weight("input.weight".into(), in_features, h);
                let bias = b.bias("input.bias".into(), h);
                input = Some((w, bias, b.bn("input", h)));
                for l in 0..config.depth {
                    let p = format!("layer{l}");
                    let layer = match kind {
                        ModelKind::Gcn => {
                            let w = b.weight(format!("{p}.weight"), h, h);
                            let bias = b.bias(format!("{p}.bias"), h);
                            LayerIds::Gcn { w, b: bias, bn: b.bn(&p, h) }
                        }
                        ModelKind::Gat => {
                            let heads = (0..config.heads)
                                .map(|k| (b.weight(format!("{p}.head{k}.w_z"), h, dh), b.weight(format!("{p}.head{k}.a"), 2 * dh, 1)))
                                .collect();
                            LayerIds::Gat { heads, bn: b.bn(&p, h) }
                        }
                        _ => {
                            let heads = (0..config.heads)
                                .map(|k| HeadIds {
                                    w_q: b.weight(format!("{p}.head{k}.w_q"), h, dh),
                                    w_k: b.weight(format!("{p}.head{k}.w_k"), h, dh),
                                    w_v: b.weight(format!("{p}.head{k}.w_v"), h, dh),
                                    attn: (kind == ModelKind::DifformerAttn)
                                        .then(|| (b.weight(format!("{p}.head{k}.w_z"), h, dh), b.weight(format!("{p}.head{k}.a"), 2 * dh, 1))),
                                })
                                .collect();
                            LayerIds::Diffusion { heads, bn: b.bn(&p, h) }
                        }
                    };
                    layers.push(layer);
                }
                h
            }
        };
        let cw = b.weight("classifier.weight".into(), classifier_in, 2);
        let cb = b.bias("classifier.bias".into(), 2);
        Ok(Self { config, in_features, params: b.store, input, layers, classifier: (cw, cb) })
    }

    /// Record the forward pass on `tape` using this model's own parameters.
    pub fn forward(&self, tape: &mut Tape, x: Var, ctx: &GraphContext, mode: Mode<'_>, frozen: bool) -> Result<Forward, ModelError> {
        self.forward_with(&self.params, tape, x, ctx, mode, frozen)
    }

    /// Forward pass with an external parameter store of the same layout
    /// (used by gradient checks). `frozen` binds parameters as constants.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: Var,
        ctx: &GraphContext,
        mut mode: Mode<'_>,
        frozen: bool,
    ) -> Result<Forward, ModelError> {
        let (n, f) = (tape.value(x).rows(), tape.value(x).cols());
        if f != self.in_features {
            return Err(ModelError::FeatureMismatch { expected: self.in_features, got: f });
        }
        if ctx.n != n {
            return Err(ModelError::GraphMismatch { graph: ctx.n, data: n });
        }
        let cfg = &self.config;
        let bind = |tape: &mut Tape, id: ParamId| if frozen { tape.frozen_param(store, id) } else { tape.param(store, id) };
        let mut updates = Vec::new();

        let mut z = x;
        if let Some((w, b, bn)) = self.input {
            let (wv, bv) = (bind(tape, w), bind(tape, b));
            let zw = tape.matmul(z, wv)?;
            let pre = tape.add(zw, bv)?;
            z = self.post(tape, store, pre, bn, true, &mut mode, frozen, &mut updates)?;
        }
        let last = self.layers.len().saturating_sub(1);
        for (l, layer) in self.layers.iter().enumerate() {
            // Diffusion layers stay linear between propagation steps.
            let activate = (l < last && !cfg.kind.is_diffusion()) || cfg.kind == ModelKind::Mlp;
            z = match layer {
                LayerIds::Dense { w, b, bn } => {
                    let (wv, bv) = (bind(tape, *w), bind(tape, *b));
                    let zw = tape.matmul(z, wv)?;
                    let pre = tape.add(zw, bv)?;
                    self.post(tape, store, pre, *bn, activate, &mut mode, frozen, &mut updates)?
                }
                LayerIds::Gcn { w, b, bn } => {
                    let (wv, bv) = (bind(tape, *w), bind(tape, *b));
                    let prop = layers::gcn_layer(tape, z, &ctx.gcn_adj, wv, false)?;
                    let pre = tape.add(prop, bv)?;
                    self.post(tape, store, pre, *bn, activate, &mut mode, frozen, &mut updates)?
                }
                LayerIds::Gat { heads, bn } => {
                    let hv: Vec<(Var, Var)> = heads.iter().map(|&(w, a)| (bind(tape, w), bind(tape, a))).collect();
                    let pre = layers::gat_layer(tape, z, &ctx.self_loop_edges, &hv, false)?;
                    self.post(tape, store, pre, *bn, activate, &mut mode, frozen, &mut updates)?
                }
                LayerIds::Diffusion { heads, bn } => {
                    let hv: Vec<HeadVars> = heads
                        .iter()
                        .map(|h| HeadVars {
                            w_q: bind(tape, h.w_q),
                            w_k: bind(tape, h.w_k),
                            w_v: bind(tape, h.w_v),
                            attn: h.attn.map(|(w, a)| (bind(tape, w), bind(tape, a))),
                        })
                        .collect();
                    let norm;
                    let term = match (cfg.kind, cfg.use_graph) {
                        (ModelKind::DifformerAttn, true) => {
                            norm = tape.constant(ctx.edge_norm.clone());
                            GraphTerm::Attention { edges: &ctx.edges, norm }
                        }
                        (ModelKind::DifformerS, true) => GraphTerm::Fixed(&ctx.sym_adj),
                        _ => GraphTerm::None,
                    };
                    let prop = layers::difformer_propagation(tape, z, &hv, &term)?;
                    let pre = layers::residual_mix(tape, z, prop, cfg.residual_alpha)?;
                    self.post(tape, store, pre, *bn, activate, &mut mode, frozen, &mut updates)?
                }
            };
        }
        let (cw, cb) = (bind(tape, self.classifier.0), bind(tape, self.classifier.1));
        let zw = tape.matmul(z, cw)?;
        let logits = tape.add(zw, cb)?;
        Ok(Forward { logits, bn_updates: updates })
    }

    /// Batch-norm, optional relu, dropout.
    #[allow(clippy::too_many_arguments)]
    fn post(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pre: Var,
        bn: BnIds,
        activate: bool,
        mode: &mut Mode<'_>,
        frozen: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var, ModelError> {
        let (g, b) = if frozen {
            (tape.frozen_param(store, bn.gamma), tape.frozen_param(store, bn.beta))
        } else {
            (tape.param(store, bn.gamma), tape.param(store, bn.beta))
        };
        let normed = if mode.is_train() {
            let (v, stats) = tape.batch_norm_train(pre, g, b, BN_EPS)?;
            updates.push(BnUpdate { mean: bn.mean, var: bn.var, stats });
            v
        } else {
            tape.batch_norm_eval(pre, g, b, store.value(bn.mean).data(), store.value(bn.var).data(), BN_EPS)?
        };
        let act = if activate { tape.relu(normed)? } else { normed };
        match mode {
            Mode::Train(rng) => Ok(tape.dropout(act, self.config.dropout, *rng)?),
            Mode::Eval => Ok(act),
        }
    }

    /// `running ← m·running + (1 − m)·batch`, with `m` = [`BN_MOMENTUM`].
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            blend(self.params.value_mut(u.mean).data_mut(), &u.stats.mean);
            blend(self.params.value_mut(u.var).data_mut(), &u.stats.var);
        }
    }

    /// Eval-mode logits `N×2`.
    pub fn logits(&self, x: &Tensor, ctx: &GraphContext) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, ctx, Mode::Eval, true)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Weight of the input column `j` in the first affine map, zeroed out.
    /// Makes feature `j` irrelevant to the model's output.
    pub fn zero_input_feature(&mut self, j: usize) {
        let id = match (self.input, self.layers.first()) {
            (Some((w, _, _)), _) => w,
            (None, Some(LayerIds::Dense { w, .. })) => *w,
            _ => self.classifier.0,
        };
        let t = self.params.value_mut(id);
        let cols = t.cols();
        t.data_mut()[j * cols..(j + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
    }
}

fn blend(running: &mut [f64], batch: &[f64]) {
    for (r, b) in running.iter_mut().zip(batch) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
    }
}

#[cfg(test)]
mod tests;
