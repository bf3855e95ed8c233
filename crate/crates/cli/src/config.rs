//! Run configuration: a JSON object whose keys are either nested one level
//! per section (`{"graph": {"mu": 0.3}}`) or flat with a section prefix
//! (`{"graph.mu": 0.3}`). `seed`, `out_dir` and `jobs` may also appear bare
//! at the top level. Absent keys take their defaults; unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use simgnn::data::{SplitSpec, SyntheticSpec};
use simgnn::explain::ExplainParams;
use simgnn::graph::KernelParams;
use simgnn::models::{ModelConfig, ModelKind};
use simgnn::numerics::rng::derive_seed;
use simgnn::train_eval::{Selection, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Master seed; every module seed is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for repetitions and explanations (all cores if unset).
    pub jobs: Option<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, out_dir: PathBuf::from("out"), jobs: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_per_class: usize,
    pub n_features: usize,
    pub n_informative: usize,
    pub margin: f64,
    pub cluster_spread: f64,
    pub group_loading: f64,
    /// Fraction of cells blanked after generation.
    pub missing_rate: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            n_per_class: s.n_per_class,
            n_features: s.n_features,
            n_informative: s.n_informative,
            margin: s.margin,
            cluster_spread: s.cluster_spread,
            group_loading: s.group_loading,
            missing_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Raw cohort CSV for `preprocess`; `<out_dir>/cohort.csv` when unset.
    pub input: Option<PathBuf>,
    pub label_column: String,
    pub missing_token: String,
    /// Columns missing in more than this fraction of subjects are dropped.
    pub drop_threshold: f64,
    pub impute_k: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { input: None, label_column: "label".into(), missing_token: "NA".into(), drop_threshold: 0.5, impute_k: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub residual_alpha: f64,
    pub dropout: f64,
    /// Per-kind default when unset (on for DIFFormer-attn, off for DIFFormer-s).
    pub use_graph: Option<bool>,
    pub binary_degree: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(ModelKind::DifformerAttn);
        Self {
            kind: m.kind,
            depth: m.depth,
            hidden: m.hidden,
            heads: m.heads,
            residual_alpha: m.residual_alpha,
            dropout: m.dropout,
            use_graph: None,
            binary_degree: m.binary_degree,
        }
    }
}

impl ModelSection {
    /// This section's architecture settings applied to `kind`.
    pub fn for_kind(&self, kind: ModelKind) -> ModelConfig {
        let base = ModelConfig::new(kind);
        ModelConfig {
            kind,
            depth: self.depth,
            hidden: self.hidden,
            heads: self.heads,
            residual_alpha: self.residual_alpha,
            dropout: self.dropout,
            use_graph: self.use_graph.unwrap_or(base.use_graph),
            binary_degree: self.binary_degree,
        }
    }

    pub fn config(&self) -> ModelConfig {
        self.for_kind(self.kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub selection: Selection,
    pub patience: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { epochs: t.epochs, learning_rate: t.learning_rate, weight_decay: t.weight_decay, selection: t.selection, patience: t.patience }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub labeled_per_class: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub repetitions: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self { labeled_per_class: s.labeled_per_class, val_size: s.val_size, test_size: s.test_size, repetitions: s.repetitions }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub models: Vec<ModelKind>,
    pub ells: Vec<usize>,
    pub depth_models: Vec<ModelKind>,
    pub depths: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        use ModelKind::*;
        Self {
            models: vec![Lr, Gcn, Gat, DifformerS, DifformerAttn],
            ells: vec![1, 2, 5, 10, 20, 50, 100],
            depth_models: vec![Gcn, DifformerAttn],
            depths: vec![2, 4, 6, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda_size: f64,
    pub lambda_ent: f64,
    pub init_std: f64,
    /// Number of test subjects (repetition 0) to explain, in split order.
    pub targets: usize,
    pub correct_only: bool,
    /// Trained model; `<out_dir>/model.json` when unset.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExplainSection {
    fn default() -> Self {
        let e = ExplainParams::default();
        Self {
            epochs: e.epochs,
            learning_rate: e.learning_rate,
            lambda_size: e.lambda_size,
            lambda_ent: e.lambda_ent,
            init_std: e.init_std,
            targets: 50,
            correct_only: true,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub run: RunSection,
    pub synth: SynthSection,
    pub data: DataSection,
    pub graph: KernelParams,
    pub model: ModelSection,
    pub train: TrainSection,
    pub split: SplitSection,
    pub sweep: SweepSection,
    pub explain: ExplainSection,
}

const SECTIONS: [&str; 9] = ["run", "synth", "data", "graph", "model", "train", "split", "sweep", "explain"];
const BARE_RUN_KEYS: [&str; 3] = ["seed", "out_dir", "jobs"];

/// Override of one dotted key, e.g. `("graph.mu", 0.3)`.
pub type Override = (String, Value);

/// Parse `section.key=value`; the value is read as JSON, or as a string if
/// it is not valid JSON.
pub fn parse_assignment(s: &str) -> Result<Override, CliError> {
    let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config(format!("expected key=value, got {s:?}")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn split_key(key: &str) -> Result<(String, String), CliError> {
    if let Some((s, k)) = key.split_once('.') {
        if k.contains('.') {
            return Err(CliError::Config(format!("key {key:?} nests more than one level")));
        }
        Ok((s.to_string(), k.to_string()))
    } else if BARE_RUN_KEYS.contains(&key) {
        Ok(("run".into(), key.into()))
    } else {
        Err(CliError::Config(format!("unknown key {key:?} (expected section.key)")))
    }
}

/// Collect a JSON object into per-section key maps.
fn sections_of(doc: &Value) -> Result<BTreeMap<String, Map<String, Value>>, CliError> {
    let obj = doc.as_object().ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
    let mut out: BTreeMap<String, Map<String, Value>> = BTreeMap::new();
    for (key, value) in obj {
        match value {
            Value::Object(inner) if !key.contains('.') && !BARE_RUN_KEYS.contains(&key.as_str()) => {
                let sec = out.entry(key.clone()).or_default();
                for (k, v) in inner {
                    if k.contains('.') {
                        return Err(CliError::Config(format!("key {key}.{k} nests more than one level")));
                    }
                    sec.insert(k.clone(), v.clone());
                }
            }
            _ => {
                let (s, k) = split_key(key)?;
                out.entry(s).or_default().insert(k, value.clone());
            }
        }
    }
    Ok(out)
}

impl CliConfig {
    /// Defaults, then `doc`, then `overrides` in order. Validates ranges.
    pub fn from_json(doc: &Value, overrides: &[Override]) -> Result<Self, CliError> {
        let mut sections = sections_of(doc)?;
        for (key, value) in overrides {
            let (s, k) = split_key(key)?;
            sections.entry(s).or_default().insert(k, value.clone());
        }
        if let Some(unknown) = sections.keys().find(|s| !SECTIONS.contains(&s.as_str())) {
            return Err(CliError::Config(format!("unknown section {unknown:?} (expected one of {})", SECTIONS.join(", "))));
        }
        let mut cfg = CliConfig::default();
        for (name, map) in sections {
            let v = Value::Object(map);
            let err = |e: serde_json::Error| CliError::Config(format!("{name}: {e}"));
            match name.as_str() {
                "run" => cfg.run = serde_json::from_value(v).map_err(err)?,
                "synth" => cfg.synth = serde_json::from_value(v).map_err(err)?,
                "data" => cfg.data = serde_json::from_value(v).map_err(err)?,
                "graph" => cfg.graph = from_value_with_defaults(v).map_err(err)?,
                "model" => cfg.model = serde_json::from_value(v).map_err(err)?,
                "train" => cfg.train = serde_json::from_value(v).map_err(err)?,
                "split" => cfg.split = serde_json::from_value(v).map_err(err)?,
                "sweep" => cfg.sweep = serde_json::from_value(v).map_err(err)?,
                "explain" => cfg.explain = serde_json::from_value(v).map_err(err)?,
                _ => unreachable!("sections checked above"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file (or start from defaults when `path` is `None`).
    pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<Self, CliError> {
        let doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        Self::from_json(&doc, overrides)
    }

    /// Nested JSON of every field; `from_json` of it gives back `self`.
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let g = &self.graph;
        if !(0.1..=1.0).contains(&g.mu) {
            return bad(format!("graph.mu = {} outside [0.1, 1.0]", g.mu));
        }
        if g.k_neighbors == 0 {
            return bad("graph.k_neighbors must be at least 1".into());
        }
        if !(g.edge_threshold > 0.0 && g.edge_threshold.is_finite()) {
            return bad(format!("graph.edge_threshold = {} must be positive", g.edge_threshold));
        }
        let s = &self.synth;
        if s.n_per_class == 0 || s.n_features == 0 {
            return bad("synth.n_per_class and synth.n_features must be at least 1".into());
        }
        if s.n_informative > s.n_features {
            return bad(format!("synth.n_informative = {} exceeds synth.n_features = {}", s.n_informative, s.n_features));
        }
        if !(0.0..1.0).contains(&s.missing_rate) {
            return bad(format!("synth.missing_rate = {} outside [0, 1)", s.missing_rate));
        }
        if !(0.0..=1.0).contains(&s.group_loading) || !(s.margin.is_finite() && s.cluster_spread >= 0.0 && s.cluster_spread.is_finite()) {
            return bad("synth.group_loading must lie in [0, 1]; margin and cluster_spread must be finite, spread non-negative".into());
        }
        let d = &self.data;
        if !(d.drop_threshold > 0.0 && d.drop_threshold <= 1.0) {
            return bad(format!("data.drop_threshold = {} outside (0, 1]", d.drop_threshold));
        }
        if d.impute_k == 0 {
            return bad("data.impute_k must be at least 1".into());
        }
        for kind in std::iter::once(self.model.kind).chain(self.sweep.models.iter().copied()).chain(self.sweep.depth_models.iter().copied()) {
            self.model.for_kind(kind).validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        }
        self.train_config().validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        if self.split.repetitions == 0 {
            return bad("split.repetitions must be at least 1".into());
        }
        if self.sweep.models.is_empty() || self.sweep.ells.is_empty() || self.sweep.depth_models.is_empty() || self.sweep.depths.is_empty() {
            return bad("sweep lists must be non-empty".into());
        }
        if self.sweep.depths.contains(&0) {
            return bad("sweep.depths must be at least 1".into());
        }
        self.explain_params().validate().map_err(|e| CliError::Config(format!("explain: {e}")))?;
        if self.explain.targets == 0 {
            return bad("explain.targets must be at least 1".into());
        }
        if self.run.jobs == Some(0) {
            return bad("run.jobs must be at least 1".into());
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let s = &self.synth;
        SyntheticSpec {
            n_per_class: s.n_per_class,
            n_features: s.n_features,
            n_informative: s.n_informative,
            margin: s.margin,
            cluster_spread: s.cluster_spread,
            group_loading: s.group_loading,
            seed: derive_seed(self.run.seed, "synth", 0),
        }
    }

    pub fn missing_seed(&self) -> u64 {
        derive_seed(self.run.seed, "missing", 0)
    }

    pub fn split_spec(&self) -> SplitSpec {
        let s = &self.split;
        SplitSpec {
            labeled_per_class: s.labeled_per_class,
            val_size: s.val_size,
            test_size: s.test_size,
            repetitions: s.repetitions,
            seed: derive_seed(self.run.seed, "split", 0),
        }
    }

    /// Training settings. Repetition `r` of an experiment trains with
    /// `derive_seed(seed, "train", r)` on top of this base seed.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            selection: t.selection,
            patience: t.patience,
            seed: derive_seed(self.run.seed, "train", 0),
        }
    }

    pub fn explain_params(&self) -> ExplainParams {
        let e = &self.explain;
        ExplainParams {
            epochs: e.epochs,
            learning_rate: e.learning_rate,
            lambda_size: e.lambda_size,
            lambda_ent: e.lambda_ent,
            init_std: e.init_std,
            seed: derive_seed(self.run.seed, "explain", 0),
        }
    }
}

/// `KernelParams` has no serde defaults of its own; fill absent keys from
/// `KernelParams::default()` and reject unknown ones.
fn from_value_with_defaults(v: Value) -> Result<KernelParams, serde_json::Error> {
    let mut base = serde_json::to_value(KernelParams::default()).expect("serializes");
    let base_map = base.as_object_mut().expect("object");
    if let Value::Object(m) = v {
        for (k, val) in m {
            if !base_map.contains_key(&k) {
                let known: Vec<&str> = base_map.keys().map(String::as_str).collect();
                return Err(serde::de::Error::custom(format!("unknown field `{k}`, expected one of {}", known.join(", "))));
            }
            base_map.insert(k, val);
        }
    }
    serde_json::from_value(base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_config_has_training_defaults() {
        let c = CliConfig::from_json(&json!({}), &[]).unwrap();
        assert_eq!((c.train.epochs, c.train.learning_rate, c.train.weight_decay), (1000, 0.001, 0.01));
        assert_eq!((c.model.dropout, c.model.hidden), (0.5, 64));
    }

    #[test]
    fn flat_and_nested_agree() {
        let a = CliConfig::from_json(&json!({"graph": {"mu": 0.7}, "seed": 4}), &[]).unwrap();
        let b = CliConfig::from_json(&json!({"graph.mu": 0.7, "run.seed": 4}), &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.graph.mu, 0.7);
        assert_eq!(a.graph.k_neighbors, 20);
    }

    #[test]
    fn overrides_win() {
        let c = CliConfig::from_json(&json!({"graph": {"mu": 0.7}}), &[("graph.mu".into(), json!(0.3))]).unwrap();
        assert_eq!(c.graph.mu, 0.3);
    }

    #[test]
    fn range_and_unknown_key_errors() {
        let e = CliConfig::from_json(&json!({"graph.mu": 1.5}), &[]).unwrap_err();
        assert!(e.to_string().contains("graph.mu"), "{e}");
        let e = CliConfig::from_json(&json!({"graph": {"muu": 0.5}}), &[]).unwrap_err();
        assert!(e.to_string().contains("muu"), "{e}");
        let e = CliConfig::from_json(&json!({"train.seed": 3}), &[]).unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
        assert!(CliConfig::from_json(&json!({"nope": {}}), &[]).is_err());
        assert!(CliConfig::from_json(&json!({"a.b.c": 1}), &[]).is_err());
        assert!(CliConfig::from_json(&json!({"model.hidden": 30}), &[]).is_err());
        assert!(CliConfig::from_json(&json!([1]), &[]).is_err());
    }

    #[test]
    fn emitted_config_round_trips() {
        let c = CliConfig::from_json(&json!({"model.kind": "GCN", "train.patience": 5, "data.input": "x.csv"}), &[]).unwrap();
        assert_eq!(CliConfig::from_json(&c.to_json(), &[]).unwrap(), c);
    }

    #[test]
    fn assignment_parsing() {
        assert_eq!(parse_assignment("graph.mu=0.3").unwrap(), ("graph.mu".into(), json!(0.3)));
        assert_eq!(parse_assignment("model.kind=GCN").unwrap(), ("model.kind".into(), json!("GCN")));
        assert!(parse_assignment("novalue").is_err());
    }

    #[test]
    fn seeds_derive_from_master() {
        let a = CliConfig::from_json(&json!({"seed": 1}), &[]).unwrap();
        let b = CliConfig::from_json(&json!({"seed": 2}), &[]).unwrap();
        assert_ne!(a.split_spec().seed, b.split_spec().seed);
        assert_ne!(a.train_config().seed, b.train_config().seed);
    }
}
