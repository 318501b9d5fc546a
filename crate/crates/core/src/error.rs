use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid hierarchy: {0}")]
    Hierarchy(String),

    #[error("duplicate attribute {text:?} (categories {first:?} and {second:?})")]
    DuplicateAttribute {
        text: String,
        first: String,
        second: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("backend {0:?} is not differentiable")]
    NotDifferentiable(String),

    #[error("model mismatch: {left:?} vs {right:?}")]
    ModelMismatch { left: String, right: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error(
        "cannot resolve the category of command {0:?}: run the category finder or pin the category in config"
    )]
    UnresolvedCategory(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("no relevant images for command {command:?}; inspect the label set {labels:?}")]
    NoRelevantImages { command: String, labels: Vec<String> },

    #[error("only {found} relevant images for command {command:?}, at least {min} required")]
    TooFewRelevant {
        command: String,
        found: usize,
        min: usize,
    },

    #[error("zero normalization range for {0:?}")]
    ZeroRange(String),

    #[error("no manipulation effect (normalized command delta {0})")]
    NoManipulationEffect(f64),

    #[error("training diverged: non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("infeasible co-occurrence matrix: {0}")]
    InfeasibleCorrelation(String),

    #[error("item {id:?} unreadable: {source}")]
    UnreadableItem {
        id: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// Backend-side failures (unavailable model, process crash, missing capability).
    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Backend(_) | Error::NotDifferentiable(_))
    }

    /// Failures caused by user-supplied configuration or input files.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Validation(_)
                | Error::Hierarchy(_)
                | Error::DuplicateAttribute { .. }
                | Error::UnresolvedCategory(_)
                | Error::InfeasibleCorrelation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
