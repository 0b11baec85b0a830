use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {key}: {msg}")]
    Config { key: String, msg: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid speaker id {id} (world has {n} speakers)")]
    InvalidSpeaker { id: usize, n: usize },

    #[error("token {token} out of range (vocabulary size {vocab})")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("mixing matrix rank deficient after {attempts} attempts (min singular value {min_sv:e})")]
    RankDeficient { attempts: usize, min_sv: f64 },

    #[error("non-finite loss{}", .param.as_ref().map(|p| format!(" (parameter {p})")).unwrap_or_default())]
    NonFiniteLoss { param: Option<String> },

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("ode state became non-finite at step {step}")]
    SolverDiverged { step: usize },

    #[error("training diverged at step {step}: {source}")]
    TrainingDiverged {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("zero variance input to correlation")]
    ZeroVariance,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: String, expected: String },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path);
        }
        Error::Io { path, source }
    }

    /// Short machine-readable category used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Precondition(_) => "precondition",
            Error::Shape(_) => "shape",
            Error::InvalidSpeaker { .. } => "speaker",
            Error::TokenOutOfRange { .. } => "token",
            Error::RankDeficient { .. } => "rank",
            Error::NonFiniteLoss { .. } | Error::NonFinite { .. } => "nonfinite",
            Error::SolverDiverged { .. } => "solver",
            Error::TrainingDiverged { .. } => "diverged",
            Error::ZeroVariance => "zero_variance",
            Error::Degenerate(_) => "degenerate",
            Error::Version { .. } => "version",
            Error::Corrupt(_) => "corrupt",
            Error::MissingFile(_) => "missing_file",
            Error::Io { .. } => "io",
        }
    }
}
