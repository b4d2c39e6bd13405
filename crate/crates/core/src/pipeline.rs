// SPDX-License-Identifier: Apache-2.0

//! Per-sample stage functions shared by the command-line driver and the
//! synthetic corpus generator.

use serde::{Deserialize, Serialize};

use crate::cueminer::{mine_graph_cues, mine_table_cues, CueConfig, CueSets};
use crate::detector::baseline_scores;
use crate::error::{Error, Result};
use crate::kgstore::{Graph, QASample, Table};
use crate::labeler::{label_generation, LabelResult};
use crate::linearizer::{linearize, PromptLayout, PromptTemplate};
use crate::metrics::{compute_metrics, MetricResult, Scope};
use crate::stats::SampleRecord;
use crate::tracefmt::TraceBundle;

/// Cue sets and prompt layout for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prepared {
    pub cues: CueSets,
    pub layout: PromptLayout,
}

/// Mine cues and render the trimmed subgraph as a prompt.
pub fn prepare_graph_sample(
    graph: &Graph,
    sample: &QASample,
    cfg: &CueConfig,
    template: &PromptTemplate,
) -> Result<Prepared> {
    let cues = mine_graph_cues(graph, sample, cfg)?;
    let layout = linearize(&cues.trimmed, graph, sample, template)?;
    Ok(Prepared { cues, layout })
}

/// Table counterpart of [`prepare_graph_sample`]; the whole table is
/// rendered, one cell per line.
pub fn prepare_table_sample(
    table: &Table,
    sample: &QASample,
    cfg: &CueConfig,
    template: &PromptTemplate,
) -> Result<Prepared> {
    let graph = Graph::from_table(table)?;
    let cues = mine_table_cues(&graph, table, sample, cfg)?;
    let layout = linearize(&cues.trimmed, &graph, sample, template)?;
    Ok(Prepared { cues, layout })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub metrics: MetricResult,
    pub label: LabelResult,
    pub record: SampleRecord,
}

/// Metrics, label and baselines for one traced sample.
pub fn analyze_sample(
    bundle: &TraceBundle,
    prepared: &Prepared,
    sample: &QASample,
    scope: Scope,
    f1_threshold: f64,
    dataset_tag: &str,
) -> Result<Analysis> {
    let id = &sample.sample_id;
    if bundle.sample_id != *id || prepared.layout.sample_id != *id || prepared.cues.sample_id != *id {
        return Err(Error::Invalid(format!(
            "sample id mismatch: sample {id}, bundle {}, layout {}, cues {}",
            bundle.sample_id, prepared.layout.sample_id, prepared.cues.sample_id
        )));
    }
    let metrics = compute_metrics(bundle, &prepared.layout, &prepared.cues, scope)?;
    let golds: Vec<&str> = sample.gold_answers.iter().map(String::as_str).collect();
    let label = label_generation(&bundle.generated_text, &golds, f1_threshold);
    let record = SampleRecord {
        sample_id: id.clone(),
        ssr: metrics.ssr,
        sas: metrics.sas,
        label: label.label,
        baseline_scores: baseline_scores(bundle, &prepared.cues.support)?,
        quadrant: None,
        dataset_tag: dataset_tag.to_string(),
    };
    Ok(Analysis { metrics, label, record })
}
