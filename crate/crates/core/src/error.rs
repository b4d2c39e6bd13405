// SPDX-License-Identifier: Apache-2.0

//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("entity {entity:?} has conflicting labels {first:?} and {second:?}")]
    ConflictingLabel { entity: String, first: String, second: String },

    #[error("missing label for {0:?}")]
    MissingLabel(String),

    #[error("sample {sample}: question entity {entity:?} is not in the graph")]
    UnresolvedEntity { sample: String, entity: String },

    #[error("sample {sample}: no gold answer entity reachable in trimmed subgraph")]
    Unreachable { sample: String },

    #[error("sample {sample}: no path from question to answer within {max_hops} hops")]
    NoPath { sample: String, max_hops: usize },

    #[error("trace bundle shape mismatch: {0}")]
    Shape(String),

    #[error("attention row (layer {layer}, head {head}, row {row}) sums to {sum}")]
    RowSum { layer: usize, head: usize, row: usize, sum: f64 },

    #[error("trace bundle invariant violated: {0}")]
    Bundle(String),

    #[error("no source token overlaps a core structural cue")]
    EmptyCore,

    #[error("attention row (layer {layer}, head {head}, row {row}) has zero knowledge-region mass")]
    ZeroRegionMass { layer: usize, head: usize, row: usize },

    #[error("embedding missing for unit {0}")]
    MissingEmbedding(u32),

    #[error("all answer tokens have degenerate (zero-norm) hidden states")]
    DegenerateEmbedding,

    #[error("infeasible planted target: {0}")]
    Infeasible(String),

    #[error("statistic undefined: {0}")]
    Undefined(String),

    #[error("need both classes present: {0}")]
    SingleClass(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
