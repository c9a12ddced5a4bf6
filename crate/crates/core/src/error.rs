use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("incomplete chunk: MASK token at position {position}")]
    IncompleteChunk { position: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    TrainingDivergence { step: u64, detail: String },

    #[error("model contract violated: {0}")]
    ModelContract(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("table coverage gap: {0}")]
    Coverage(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short category name used by the CLI when reporting failures.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::DegenerateData(_) => "degenerate-data",
            Error::IncompleteChunk { .. } => "incomplete-chunk",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::TrainingDivergence { .. } => "training-divergence",
            Error::ModelContract(_) => "model-contract",
            Error::Invariant(_) => "invariant",
            Error::Coverage(_) => "coverage",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
