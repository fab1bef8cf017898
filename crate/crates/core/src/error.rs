// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("missing corpus file for language `{lang}`: {path}")]
    MissingLanguage { lang: String, path: PathBuf },

    #[error("corpus validation failed for sample `{sample_id}`: {reason}")]
    CorpusValidation { sample_id: String, reason: String },

    #[error("invalid corpus: {0}")]
    Corpus(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("prompt of {tokens} tokens exceeds the context limit of {limit}")]
    ContextOverflow { tokens: usize, limit: usize },

    #[error("backend `{backend}` does not support {capability}")]
    Capability {
        backend: String,
        capability: &'static str,
    },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("invalid trace: {0}")]
    Trace(String),

    #[error("judge error: {0}")]
    Judge(String),

    #[error("MRD undefined: relevance profile has zero total mass")]
    UndefinedMrd,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
