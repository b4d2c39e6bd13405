// SPDX-License-Identifier: Apache-2.0

//! Knowledge-grounded hallucination diagnostics.
//!
//! Cue mining over a knowledge graph or table, prompt linearization with
//! character spans, a binary trace-bundle format, attention (SSR) and
//! semantic alignment (SAS) metrics, answer labeling, group statistics and
//! a small detector.

pub mod cueminer;
pub mod detector;
pub mod error;
pub mod exporter;
pub mod kgstore;
pub mod labeler;
pub mod linearizer;
pub mod metrics;
pub mod pipeline;
pub mod seeds;
pub mod stats;
pub mod synth;
pub mod tracefmt;

pub use cueminer::{CueConfig, CueSets};
pub use error::{Error, Result};
pub use kgstore::{Graph, QASample, Table, Triple, UnitId};
pub use labeler::{Label, LabelResult};
pub use linearizer::{PromptLayout, PromptTemplate, Span};
pub use metrics::{MetricResult, Scope, TokenPartition};
pub use stats::SampleRecord;
pub use tracefmt::{PlantedSpec, TraceBundle};
