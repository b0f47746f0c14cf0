//! Error type shared across the toolkit.

use thiserror::Error;

/// Unified error type. Each variant maps to a documented CLI exit code via
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A prompt token is not in the active vocabulary.
    #[error("unknown vocabulary token: {token:?}")]
    UnknownToken { token: String },

    /// A probe target (class or feature index) does not exist.
    #[error("unknown probe target {target}; available: {available}")]
    UnknownTarget { target: String, available: String },

    /// A backend id is not registered.
    #[error("unknown backend {id:?}; available: {}", available.join(", "))]
    UnknownBackend { id: String, available: Vec<String> },

    /// A segmentation backend is not registered or cannot be reached.
    #[error("segmenter unavailable: {0}")]
    SegmenterUnavailable(String),

    /// Array shapes do not line up.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// A latent or loss became non-finite.
    #[error("non-finite value at step {step}: {context}")]
    NonFinite { step: usize, context: String },

    /// Every restart of an optimization diverged.
    #[error("all restarts diverged; restart init seeds: {seeds:?}")]
    AllRestartsDiverged { seeds: Vec<u64> },

    /// A world seed failed the build-time sanity gate.
    #[error("toy world sanity gate failed for seed {seed}: {diagnostics}")]
    SanityGate { seed: u64, diagnostics: String },

    /// Bad run configuration or config file.
    #[error("config error: {0}")]
    Config(String),

    /// A persisted artifact violates its schema.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Other(String),
}

impl Error {
    /// Stable machine-readable kind string, used in CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::UnknownToken { .. } => "unknown-token",
            Error::UnknownTarget { .. } => "unknown-target",
            Error::UnknownBackend { .. } => "unknown-backend",
            Error::SegmenterUnavailable(_) => "segmenter-unavailable",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::NonFinite { .. } => "non-finite",
            Error::AllRestartsDiverged { .. } => "diverged",
            Error::SanityGate { .. } => "sanity-gate",
            Error::Config(_) => "config",
            Error::Schema(_) => "schema",
            Error::Io(_) => "io",
            Error::Other(_) => "other",
        }
    }

    /// CLI exit code for this error. Documented in `docs/cli.md`.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) => 3,
            Error::UnknownBackend { .. } | Error::SegmenterUnavailable(_) => 4,
            Error::UnknownToken { .. }
            | Error::UnknownTarget { .. }
            | Error::Contract(_)
            | Error::ShapeMismatch { .. } => 5,
            Error::NonFinite { .. } | Error::AllRestartsDiverged { .. } | Error::SanityGate { .. } => 6,
            Error::Io(_) => 7,
            Error::Other(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
