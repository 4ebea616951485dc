use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed array file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported array in {path}: {reason}")]
    UnsupportedShape { path: PathBuf, reason: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("manifest inconsistency: {0}")]
    ManifestInconsistency(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid cluster count k={k} for {m} rows")]
    InvalidK { k: usize, m: usize },

    #[error("invalid budget {k} for {m} rows")]
    InvalidBudget { k: usize, m: usize },

    #[error("exact k-means is limited to {max} rows, got {m}")]
    InstanceTooLarge { m: usize, max: usize },

    #[error("nothing pruned: all {m} rows retained")]
    NothingPruned { m: usize },

    #[error("invalid selection: {0}")]
    InvalidSelection(String),

    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),

    #[error("theorem violation in layer {layer} at k={k}: {relation} (lhs={lhs:e}, rhs={rhs:e})")]
    TheoremViolation {
        layer: String,
        k: usize,
        relation: String,
        lhs: f64,
        rhs: f64,
    },

    #[error("report error: {0}")]
    Report(String),
}
