//! Command-line driver: configuration handling and the pipeline
//! subcommands (`synth → preprocess → build-graph → train → sweep-labels /
//! sweep-depth → explain → report`).

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::Parser;
use serde_json::Value;

pub use commands::{run, Artifacts, Subcommand};
pub use config::CliConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "simgnn", version, about = "Subject-similarity graph learning pipeline")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Subcommand,
    /// JSON config file (nested sections or flat `section.key` keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Kernel scale μ.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Neighbours used for the kernel bandwidth.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Model kind (LR, MLP, GCN, GAT, DIFFormer-s, DIFFormer-attn).
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Any config key, e.g. `--set split.repetitions=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Cli {
    /// Config file, then `--set` assignments, then the dedicated flags.
    pub fn config(&self) -> Result<CliConfig, CliError> {
        let mut overrides = self.set.iter().map(|s| config::parse_assignment(s)).collect::<Result<Vec<_>, _>>()?;
        let mut flag = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                overrides.push((key.to_string(), v));
            }
        };
        flag("run.seed", self.seed.map(Value::from));
        flag("run.out_dir", self.out_dir.as_ref().map(|p| Value::from(p.display().to_string())));
        flag("run.jobs", self.jobs.map(Value::from));
        flag("graph.mu", self.mu.map(Value::from));
        flag("graph.k_neighbors", self.k.map(Value::from));
        flag("train.epochs", self.epochs.map(Value::from));
        flag("train.learning_rate", self.lr.map(Value::from));
        flag("model.kind", self.model.clone().map(Value::from));
        flag("model.depth", self.depth.map(Value::from));
        CliConfig::load(self.config.as_deref(), &overrides)
    }
}

/// Parse, configure the worker pool, and run one subcommand.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.config()?;
    if let Some(j) = cfg.run.jobs {
        // Fails only if a pool already exists (e.g. a second call in-process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    run(cli.command, &cfg)
}
