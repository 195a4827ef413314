//! Corpus ingestion and the on-disk run directory.
//!
//! A run directory holds everything a stage needs to resume: records as
//! JSONL, embeddings as versioned float32 matrix files, and JSON/JSONL
//! artifacts written by later stages. Writes go through a temp file and a
//! rename so a killed process never leaves a half-written artifact.

mod corpus;
mod manifest;
mod matrix_file;
mod run_store;

use thiserror::Error;

pub use corpus::{content_id, ingest, Corpus, LabelSchema, TextRecord};
pub use manifest::{Manifest, ManifestInputs};
pub use matrix_file::{read_matrix, write_matrix, MATRIX_MAGIC};
pub use run_store::{EmbeddingVersion, RunLock, RunStore};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("record `{record}` has label `{label}` which is not a schema class")]
    UnknownLabel { record: String, label: String },
    #[error("unknown record `{0}`")]
    UnknownRecord(String),
    #[error("record `{0}` has empty text")]
    EmptyText(String),
    #[error("embedding dimension {found} does not match stored dimension {expected} for `{model}`")]
    DimensionMismatch {
        model: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid label schema: {0}")]
    Schema(String),
    #[error("matrix file {path}: {message}")]
    MatrixFormat { path: String, message: String },
    #[error("no embeddings stored for `{model}` (reduced = {reduced})")]
    MissingEmbeddings { model: String, reduced: bool },
    #[error("run directory is locked by another writer: {0}")]
    LockHeld(String),
    #[error("manifest does not match run directory: {0}")]
    ManifestMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Json { path: String, message: String },
}

impl StoreError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
