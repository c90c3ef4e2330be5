//! Fixed-length document encodings trained against TFIDF pseudo-label term
//! sets, with downstream semantic tag transfer, BM25 query expansion, and
//! multi-label text categorization.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`corpus`]: tokenization, TFIDF statistics, vocabulary construction,
//!   and pseudo-label assignment
//! - [`autodiff`]: reverse-mode differentiation over dense tensors plus Adam
//! - [`encoders`]: seven sequence encoders producing a document vector `v`
//! - [`decoder`]: label scoring and the cross-entropy / language-model losses
//! - [`trainer`]: mini-batch training with early stopping and the
//!   three-phase semi-supervised protocol
//! - [`tagger`]: cosine nearest-neighbor search and tag transfer
//! - [`retrieval`]: Okapi BM25 inverted index, query expansion, P@10
//! - [`eval`]: micro ROC AUC and labeled-fraction learning curves

pub mod autodiff;
pub mod corpus;
pub mod decoder;
pub mod encoders;
pub mod eval;
pub mod retrieval;
pub mod tagger;
pub mod trainer;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}:{line}: malformed record: {msg}")]
    MalformedLine {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unencodable document: no in-vocabulary tokens")]
    Unencodable,

    #[error("document {id} has no in-vocabulary terms, cannot assign pseudo-labels")]
    Unlabelable { id: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite {component} loss in batch {batch}")]
    NonFiniteLoss { component: &'static str, batch: usize },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
