//! Crate-wide error type and process exit-code mapping.

use thiserror::Error;

/// Unified error for the pipeline.
///
/// Variants are grouped by how the CLI should exit: configuration problems
/// (exit code 2), missing or corrupt data (exit code 3), and numeric
/// failures such as non-finite losses or degenerate codebooks (exit code 4).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or contradictory configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Missing, truncated, or malformed input data.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure: non-finite loss, degenerate codebook, overflow.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Process exit code for this error class.
    ///
    /// `0` is success; `2` config, `3` data, `4` numeric. IO and JSON
    /// failures surface while reading data files, so they map to `3`.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Toml(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
