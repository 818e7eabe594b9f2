use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{what} index {index} out of bounds (size {bound})")]
    OutOfBounds {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("stage {stage}{}: {source}", seed.map(|s| format!(" (seed {s})")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        seed: Option<u64>,
        source: Box<Error>,
    },
    #[error("artifact {path} does not match recorded hash")]
    HashMismatch { path: PathBuf },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Exit status for command-line front ends: 1 for bad input, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Config(_) | Error::Parse { .. } | Error::Toml(_) | Error::EmptyDataset(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
