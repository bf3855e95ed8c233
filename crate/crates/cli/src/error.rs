use simgnn::data::DataError;
use simgnn::explain::ExplainError;
use simgnn::graph::GraphError;
use simgnn::models::ModelError;
use simgnn::report::ReportError;
use simgnn::train_eval::TrainError;

/// Every failure maps to one of three exit codes: 1 for usage and
/// configuration, 2 for data and artifacts, 3 for numeric failures.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{module}: {msg}")]
    Data { module: &'static str, msg: String },
    #[error("{module}: numeric failure: {msg}")]
    Numeric { module: &'static str, msg: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data { .. } => 2,
            CliError::Numeric { .. } => 3,
        }
    }

    pub fn missing_artifact(what: &str, path: &std::path::Path) -> Self {
        CliError::Data { module: "cli", msg: format!("missing {what} artifact {} (run the producing subcommand first)", path.display()) }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Data { module: "cli", msg: format!("{}: {e}", path.display()) }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data { module: "data", msg: e.to_string() }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::InvalidParams(m) => CliError::Config(format!("graph: {m}")),
            e => CliError::Data { module: "graph", msg: e.to_string() },
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(n) => CliError::Numeric { module: "models", msg: n.to_string() },
            ModelError::Config(m) => CliError::Config(format!("model: {m}")),
            e => CliError::Data { module: "models", msg: e.to_string() },
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Repetition { repetition, source } => match CliError::from(*source) {
                CliError::Config(m) => CliError::Config(format!("repetition {repetition}: {m}")),
                CliError::Data { module, msg } => CliError::Data { module, msg: format!("repetition {repetition}: {msg}") },
                CliError::Numeric { module, msg } => CliError::Numeric { module, msg: format!("repetition {repetition}: {msg}") },
            },
            e @ (TrainError::NonFiniteLoss { .. } | TrainError::Numeric { .. } | TrainError::NonFiniteParams { .. }) => {
                CliError::Numeric { module: "train_eval", msg: e.to_string() }
            }
            e => CliError::Data { module: "train_eval", msg: e.to_string() },
        }
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::Model(m) => m.into(),
            ExplainError::InvalidParams(m) => CliError::Config(format!("explain: {m}")),
            e @ (ExplainError::NonFinite { .. } | ExplainError::Numerics(_)) => CliError::Numeric { module: "explain", msg: e.to_string() },
            e => CliError::Data { module: "explain", msg: e.to_string() },
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Data { module: "report", msg: e.to_string() }
    }
}
