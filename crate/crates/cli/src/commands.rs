//! Subcommand implementations. Each reads and writes fixed artifact names
//! under `run.out_dir`, so the pipeline chains without extra flags.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use simgnn::data::{
    drop_sparse_features, generate_synthetic, impute_knn_mean, inject_missing, load_csv, make_splits, normalize_unit_variance, write_csv,
    FeatureMatrix,
};
use simgnn::explain::{explain_cohort, ExplanationMatrix};
use simgnn::graph::{build_graph, graph_stats, read_edge_list, write_edge_list};
use simgnn::models::{load_checkpoint, save_checkpoint, GraphContext, ModelConfig, ModelKind};
use simgnn::numerics::rng::derive_seed;
use simgnn::report::{explanation_heatmap_svg, render_lines_svg, write_svg, Palette};
use simgnn::train_eval::{auc, predict_proba, sweep_depth, sweep_labels, train, write_sweep_csv, write_sweep_json, History, SweepTable, TrainConfig};
use simgnn::Tensor;

use crate::config::CliConfig;
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Subcommand {
    Synth,
    Preprocess,
    BuildGraph,
    Train,
    SweepLabels,
    SweepDepth,
    Explain,
    Report,
}

/// Artifact locations under the output directory.
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn at(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn cohort(&self) -> PathBuf {
        self.at("cohort.csv")
    }
    pub fn processed(&self) -> PathBuf {
        self.at("processed.csv")
    }
    pub fn normalization(&self) -> PathBuf {
        self.at("normalization.json")
    }
    pub fn graph(&self) -> PathBuf {
        self.at("graph.csv")
    }
    pub fn graph_stats(&self) -> PathBuf {
        self.at("graph_stats.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.at("model.json")
    }
    pub fn train_result(&self) -> PathBuf {
        self.at("train_result.json")
    }
    pub fn sweep(&self, axis: &str, ext: &str) -> PathBuf {
        self.at(&format!("sweep_{axis}.{ext}"))
    }
    pub fn explanation(&self) -> PathBuf {
        self.at("explanation.csv")
    }
    pub fn explanation_order(&self) -> PathBuf {
        self.at("explanation.order.json")
    }
    pub fn heatmap(&self) -> PathBuf {
        self.at("explanation_heatmap.svg")
    }
}

pub fn run(cmd: Subcommand, cfg: &CliConfig) -> Result<(), CliError> {
    let art = Artifacts::new(&cfg.run.out_dir);
    fs::create_dir_all(&art.dir).map_err(|e| CliError::io(&art.dir, e))?;
    match cmd {
        Subcommand::Synth => synth(cfg, &art),
        Subcommand::Preprocess => preprocess(cfg, &art),
        Subcommand::BuildGraph => graph(cfg, &art),
        Subcommand::Train => train_one(cfg, &art),
        Subcommand::SweepLabels => sweep(cfg, &art, false),
        Subcommand::SweepDepth => sweep(cfg, &art, true),
        Subcommand::Explain => explain(cfg, &art),
        Subcommand::Report => report(&art),
    }
}

fn write_json(value: &impl Serialize, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn require(what: &str, path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing_artifact(what, path))
    }
}

fn synth(cfg: &CliConfig, art: &Artifacts) -> Result<(), CliError> {
    let mut fm = generate_synthetic(&cfg.synthetic_spec())?;
    if cfg.synth.missing_rate > 0.0 {
        fm = inject_missing(&fm, cfg.synth.missing_rate, cfg.missing_seed())?;
    }
    write_csv(&fm, art.cohort(), &cfg.data.missing_token)?;
    info!("wrote {} ({} subjects, {} features)", art.cohort().display(), fm.n_subjects(), fm.n_features());
    Ok(())
}

#[derive(Serialize)]
struct PreprocessSummary<'a> {
    input: String,
    kept_features: &'a [String],
    dropped_features: Vec<String>,
    imputed_cells: usize,
    normalization: &'a simgnn::data::Normalization,
}

fn preprocess(cfg: &CliConfig, art: &Artifacts) -> Result<(), CliError> {
    let input = cfg.data.input.clone().unwrap_or_else(|| art.cohort());
    require("cohort", &input)?;
    let raw = load_csv(&input, &cfg.data.label_column, &cfg.data.missing_token)?;
    let kept = drop_sparse_features(&raw, cfg.data.drop_threshold)?;
    let imputed_cells = kept.missing_count();
    let filled = if imputed_cells > 0 { impute_knn_mean(&kept, cfg.data.impute_k)? } else { kept };
    let (fm, norm) = normalize_unit_variance(&filled)?;
    write_csv(&fm, art.processed(), &cfg.data.missing_token)?;
    info!("wrote {}", art.processed().display());
    let dropped_features = raw.feature_names.iter().filter(|n| !fm.feature_names.contains(n)).cloned().collect();
    // The default input is named relative to the output directory so the
    // artifact does not depend on where that directory lives.
    let input_name = match &cfg.data.input {
        Some(p) => p.display().to_string(),
        None => "cohort.csv".to_string(),
    };
    let summary = PreprocessSummary { input: input_name, kept_features: &fm.feature_names, dropped_features, imputed_cells, normalization: &norm };
    write_json(&summary, &art.normalization())
}

fn load_processed(cfg: &CliConfig, art: &Artifacts) -> Result<FeatureMatrix, CliError> {
    require("preprocessed cohort", &art.processed())?;
    Ok(load_csv(art.processed(), &cfg.data.label_column, &cfg.data.missing_token)?)
}

fn graph(cfg: &CliConfig, art: &Artifacts) -> Result<(), CliError> {
    let fm = load_processed(cfg, art)?;
    let g = build_graph(&fm.to_tensor(), &cfg.graph)?;
    write_edge_list(&g, art.graph())?;
    info!("wrote {} ({} edges)", art.graph().display(), g.n_edges());
    write_json(&graph_stats(&g), &art.graph_stats())
}

fn uses_graph(m: &ModelConfig) -> bool {
    match m.kind {
        ModelKind::Lr | ModelKind::Mlp => false,
        ModelKind::Gcn | ModelKind::Gat => true,
        ModelKind::DifformerS | ModelKind::DifformerAttn => m.use_graph,
    }
}

/// Processed features plus the graph context (an empty graph when no model needs one).
fn load_inputs(cfg: &CliConfig, art: &Artifacts, models: &[ModelConfig]) -> Result<(FeatureMatrix, Tensor, GraphContext), CliError> {
    let fm = load_processed(cfg, art)?;
    let x = fm.to_tensor();
    let ctx = if models.iter().any(uses_graph) {
        require("graph", &art.graph())?;
        let g = read_edge_list(art.graph())?;
        if g.n != fm.n_subjects() {
            return Err(CliError::Data {
                module: "graph",
                msg: format!("{} has {} vertices but the cohort has {} subjects", art.graph().display(), g.n, fm.n_subjects()),
            });
        }
        GraphContext::new(&g, models.iter().any(|m| m.binary_degree))
    } else {
        GraphContext::empty(fm.n_subjects())
    };
    Ok((fm, x, ctx))
}

#[derive(Serialize)]
struct TrainResult {
    model: ModelConfig,
    train: TrainConfig,
    repetition: usize,
    selected_epoch: usize,
    test_auc: f64,
    history: History,
}

fn train_one(cfg: &CliConfig, art: &Artifacts) -> Result<(), CliError> {
    let m = cfg.model.config();
    let (fm, x, ctx) = load_inputs(cfg, art, std::slice::from_ref(&m))?;
    let split = make_splits(&fm.labels, &cfg.split_spec(), 0)?;
    let base = cfg.train_config();
    // Same seed as repetition 0 of an experiment.
    let tc = TrainConfig { seed: derive_seed(base.seed, "train", 0), ..base };
    let trained = train(&m, &tc, &x, &fm.labels, &ctx, &split)?;
    save_checkpoint(&trained.model, art.checkpoint())?;
    info!("wrote {}", art.checkpoint().display());
    let probs = predict_proba(&trained.model, &x, &ctx)?;
    let scores: Vec<f64> = split.test.iter().map(|&i| probs[i]).collect();
    let labels: Vec<u8> = split.test.iter().map(|&i| fm.labels[i].expect("split draws labeled subjects")).collect();
    let test_auc = auc(&scores, &labels)?;
    info!("{}: test AUC {test_auc:.4} (epoch {})", m.kind, trained.selected_epoch);
    let result = TrainResult { model: m, train: tc, repetition: 0, selected_epoch: trained.selected_epoch, test_auc, history: trained.history };
    write_json(&result, &art.train_result())
}

fn sweep(cfg: &CliConfig, art: &Artifacts, depth: bool) -> Result<(), CliError> {
    let kinds = if depth { &cfg.sweep.depth_models } else { &cfg.sweep.models };
    let models: Vec<ModelConfig> = kinds.iter().map(|&k| cfg.model.for_kind(k)).collect();
    let (fm, x, ctx) = load_inputs(cfg, art, &models)?;
    let (table, axis) = if depth {
        (sweep_depth(&models, &cfg.sweep.depths, &cfg.train_config(), &x, &fm.labels, &ctx, &cfg.split_spec())?, "depth")
    } else {
        (sweep_labels(&models, &cfg.sweep.ells, &cfg.train_config(), &x, &fm.labels, &ctx, &cfg.split_spec())?, "labels")
    };
    write_sweep_csv(&table, art.sweep(axis, "csv"))?;
    write_sweep_json(&table, art.sweep(axis, "json"))?;
    write_svg(&render_lines_svg(&table)?, art.sweep(axis, "svg"))?;
    info!("wrote sweep_{axis}.csv, .json and .svg in {}", art.dir.display());
    Ok(())
}

fn explain(cfg: &CliConfig, art: &Artifacts) -> Result<(), CliError> {
    let ckpt = cfg.explain.checkpoint.clone().unwrap_or_else(|| art.checkpoint());
    require("checkpoint", &ckpt)?;
    let model = load_checkpoint(&ckpt)?;
    let (fm, x, ctx) = load_inputs(cfg, art, std::slice::from_ref(&model.config))?;
    let split = make_splits(&fm.labels, &cfg.split_spec(), 0)?;
    let targets: Vec<usize> = split.test.iter().copied().take(cfg.explain.targets).collect();
    let m = explain_cohort(&model, &x, &fm.labels, &fm.feature_names, &ctx, &targets, &cfg.explain_params(), cfg.explain.correct_only)?;
    m.write(art.explanation(), art.explanation_order())?;
    info!("wrote {} ({} features × {} subjects)", art.explanation().display(), m.n_features(), m.n_targets());
    Ok(())
}

fn report(art: &Artifacts) -> Result<(), CliError> {
    let mut wrote = 0;
    if art.explanation().exists() && art.explanation_order().exists() {
        let m = ExplanationMatrix::read(art.explanation(), art.explanation_order())?;
        write_svg(&explanation_heatmap_svg(&m, &Palette::default())?, art.heatmap())?;
        info!("wrote {}", art.heatmap().display());
        wrote += 1;
    }
    for axis in ["labels", "depth"] {
        let path = art.sweep(axis, "json");
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let table: SweepTable = serde_json::from_str(&text).map_err(|e| CliError::io(&path, e))?;
            write_svg(&render_lines_svg(&table)?, art.sweep(axis, "svg"))?;
            info!("wrote {}", art.sweep(axis, "svg").display());
            wrote += 1;
        }
    }
    if wrote == 0 {
        return Err(CliError::Data {
            module: "report",
            msg: format!(
                "no inputs found: expected {} or {} / {}",
                art.explanation().display(),
                art.sweep("labels", "json").display(),
                art.sweep("depth", "json").display()
            ),
        });
    }
    Ok(())
}
