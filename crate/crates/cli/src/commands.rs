// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use kgdiag::cueminer::CueSets;
use kgdiag::detector::{
    ablation, evaluate, evaluate_baselines, train, DetectorModel, EvalReport, Feature, TrainConfig, FEATURE_SETS,
};
use kgdiag::kgstore::{load_graph, load_samples, load_tables, read_jsonl, EntityMatcher, GraphFormat, QASample, Table};
use kgdiag::labeler::{label_generation, LabelResult};
use kgdiag::linearizer::{PromptLayout, PromptTemplate};
use kgdiag::metrics::{compute_metrics, compute_sas, MetricResult};
use kgdiag::pipeline::{analyze_sample, prepare_graph_sample, prepare_table_sample, Prepared};
use kgdiag::seeds::derive_seed;
use kgdiag::stats::robustness::RecordedTraces;
use kgdiag::stats::{
    box_stats, correlation_report, group_tests, permutation_robustness, quadrant_analysis, support_set_variants,
    BoxStats, PlantedTraceSource, SampleRecord, TraceSource,
};
use kgdiag::synth::{bayes_auc, generate_corpus};
use kgdiag::tracefmt::{read_bundle, write_bundle, PlantedSpec, TraceBundle};
use kgdiag::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::Writer;
use crate::config::RunConfig;
use crate::fail::{CliError, CliResult, Context};

pub const CUES: &str = "cues.jsonl";
pub const LAYOUTS: &str = "layouts.jsonl";
pub const RECORDS: &str = "records.jsonl";
pub const MODEL: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub sample_id: String,
    pub kind: String,
    pub reason: String,
}

fn skip_kind(e: &Error) -> &'static str {
    match e {
        Error::UnresolvedEntity { .. } => "unresolved-entity",
        Error::Unreachable { .. } | Error::NoPath { .. } => "unreachable",
        Error::MissingLabel(_) => "missing-label",
        _ => "invalid",
    }
}

fn writer(cfg: &RunConfig, stage: &str) -> CliResult<Writer> {
    Writer::new(&cfg.output_dir, stage, &cfg.hash(), cfg.seed)
}

fn template(id: &str) -> CliResult<PromptTemplate> {
    PromptTemplate::by_id(id).ok_or_else(|| CliError::Usage(format!("unknown template '{id}'")))
}

fn prompts_text(prepared: &[Prepared]) -> String {
    let mut s = String::new();
    for p in prepared {
        let _ = write!(s, ">>> {}\n{}\n\n", p.layout.sample_id, p.layout.prompt_text);
    }
    s
}

fn write_prepared(w: &mut Writer, prepared: &[Prepared], skipped: &[Skip]) -> CliResult<()> {
    let cues: Vec<&CueSets> = prepared.iter().map(|p| &p.cues).collect();
    let layouts: Vec<&PromptLayout> = prepared.iter().map(|p| &p.layout).collect();
    w.jsonl(CUES, &cues)?;
    w.jsonl(LAYOUTS, &layouts)?;
    w.jsonl("skipped.jsonl", skipped)?;
    w.text("prompts.txt", &prompts_text(prepared))?;
    Ok(())
}

/// Fill in question and answer entities from labels when a sample omits them.
fn resolve_entities(sample: &QASample, matcher: &EntityMatcher) -> QASample {
    let mut s = sample.clone();
    if s.question_entities.is_empty() {
        s.question_entities = matcher.find(&s.question);
    }
    if s.gold_answer_entities.is_empty() {
        s.gold_answer_entities = s.gold_answers.iter().flat_map(|g| matcher.find(g)).collect();
    }
    s
}

pub fn prepare(cfg: &RunConfig) -> CliResult<String> {
    let graph_path = cfg.require(&cfg.graph, "graph")?;
    let samples_path = cfg.require(&cfg.samples, "samples")?;
    let graph =
        load_graph(graph_path, GraphFormat::from_path(graph_path)).context(|| graph_path.display().to_string())?;
    let samples = load_samples(samples_path).context(|| samples_path.display().to_string())?;
    let tables: HashMap<String, Table> = match &cfg.tables {
        Some(_) => {
            let p = cfg.require(&cfg.tables, "tables")?;
            load_tables(p).context(|| p.display().to_string())?.into_iter().map(|t| (t.table_id.clone(), t)).collect()
        }
        None => HashMap::new(),
    };
    let (kg, tab) = (template(&cfg.template)?, template(&cfg.table_template)?);
    let matcher = EntityMatcher::for_graph(&graph);

    let results: Vec<Result<Prepared, Skip>> = samples
        .par_iter()
        .map(|s| {
            let skip =
                |e: Error| Skip { sample_id: s.sample_id.clone(), kind: skip_kind(&e).into(), reason: e.to_string() };
            match &s.table_id {
                Some(tid) => {
                    let table = tables.get(tid).ok_or_else(|| Skip {
                        sample_id: s.sample_id.clone(),
                        kind: "missing-table".into(),
                        reason: format!("table {tid} not found"),
                    })?;
                    prepare_table_sample(table, s, &cfg.cue, &tab).map_err(skip)
                }
                None => prepare_graph_sample(&graph, &resolve_entities(s, &matcher), &cfg.cue, &kg).map_err(skip),
            }
        })
        .collect();
    let mut prepared = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(p) => prepared.push(p),
            Err(s) => {
                eprintln!("skipped {}: {} ({})", s.sample_id, s.kind, s.reason);
                skipped.push(s);
            }
        }
    }
    let mut w = writer(cfg, "prepare")?;
    write_prepared(&mut w, &prepared, &skipped)?;
    w.finish()?;
    Ok(format!("prepare: {} prepared, {} skipped -> {}", prepared.len(), skipped.len(), cfg.output_dir.display()))
}

fn load_prepared(cfg: &RunConfig) -> CliResult<Vec<Prepared>> {
    let read = |name: &str| -> CliResult<PathBuf> {
        let p = cfg.output_dir.join(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Data(format!("{} missing; run `prepare` first", p.display())))
        }
    };
    let cues_path = read(CUES)?;
    let layouts_path = read(LAYOUTS)?;
    let cues: Vec<CueSets> = read_jsonl(&cues_path).context(|| cues_path.display().to_string())?;
    let layouts: Vec<PromptLayout> = read_jsonl(&layouts_path).context(|| layouts_path.display().to_string())?;
    if cues.len() != layouts.len() {
        return Err(CliError::Data(format!("{} cue sets but {} layouts", cues.len(), layouts.len())));
    }
    cues.into_iter()
        .zip(layouts)
        .map(|(cues, layout)| {
            if cues.sample_id != layout.sample_id {
                return Err(CliError::Data(format!(
                    "cues for {} paired with layout for {}",
                    cues.sample_id, layout.sample_id
                )));
            }
            Ok(Prepared { cues, layout })
        })
        .collect()
}

fn load_bundles(cfg: &RunConfig, prepared: &[Prepared]) -> CliResult<Vec<TraceBundle>> {
    let dir = cfg.traces_dir();
    let results: Vec<(String, kgdiag::Result<TraceBundle>)> = prepared
        .par_iter()
        .map(|p| {
            let id = &p.layout.sample_id;
            (id.clone(), read_bundle(&dir.join(id)))
        })
        .collect();
    let mut bundles = Vec::with_capacity(results.len());
    let mut problems = Vec::new();
    for (id, r) in results {
        match r {
            Ok(b) if b.sample_id == id => bundles.push(b),
            Ok(b) => problems.push(format!("{id}: bundle belongs to {}", b.sample_id)),
            Err(e) => problems.push(format!("{id}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Data(format!(
            "{} of {} trace bundles unusable under {}:\n  {}",
            problems.len(),
            prepared.len(),
            dir.display(),
            problems.join("\n  ")
        )));
    }
    Ok(bundles)
}

fn load_sample_map(cfg: &RunConfig) -> CliResult<HashMap<String, QASample>> {
    let p = cfg.require(&cfg.samples, "samples")?;
    Ok(load_samples(p).context(|| p.display().to_string())?.into_iter().map(|s| (s.sample_id.clone(), s)).collect())
}

fn sample_for<'a>(map: &'a HashMap<String, QASample>, id: &str) -> CliResult<&'a QASample> {
    map.get(id).ok_or_else(|| CliError::Data(format!("sample {id} not in the samples file")))
}

pub fn metrics(cfg: &RunConfig) -> CliResult<String> {
    let prepared = load_prepared(cfg)?;
    let bundles = load_bundles(cfg, &prepared)?;
    let rows: Vec<MetricResult> = prepared
        .par_iter()
        .zip(&bundles)
        .map(|(p, b)| compute_metrics(b, &p.layout, &p.cues, cfg.scope).context(|| p.layout.sample_id.clone()))
        .collect::<CliResult<_>>()?;
    let mut w = writer(cfg, "metrics")?;
    w.jsonl("metrics.jsonl", &rows)?;
    w.finish()?;
    Ok(format!("metrics: {} samples", rows.len()))
}

#[derive(Serialize)]
struct LabelRow<'a> {
    sample_id: &'a str,
    #[serde(flatten)]
    result: &'a LabelResult,
}

pub fn label(cfg: &RunConfig) -> CliResult<String> {
    let prepared = load_prepared(cfg)?;
    let bundles = load_bundles(cfg, &prepared)?;
    let samples = load_sample_map(cfg)?;
    let results: Vec<LabelResult> = bundles
        .iter()
        .map(|b| {
            let s = sample_for(&samples, &b.sample_id)?;
            let golds: Vec<&str> = s.gold_answers.iter().map(String::as_str).collect();
            Ok(label_generation(&b.generated_text, &golds, cfg.label_threshold))
        })
        .collect::<CliResult<_>>()?;
    let rows: Vec<LabelRow> =
        bundles.iter().zip(&results).map(|(b, r)| LabelRow { sample_id: &b.sample_id, result: r }).collect();
    let halluc = results.iter().filter(|r| r.label.is_hallucinated()).count();
    let mut w = writer(cfg, "label")?;
    w.jsonl("labels.jsonl", &rows)?;
    w.finish()?;
    Ok(format!("label: {} samples, {} hallucinated", rows.len(), halluc))
}

#[derive(Deserialize)]
struct NliRow {
    sample_id: String,
    score: f64,
}

#[derive(Serialize)]
struct TTestReport {
    groups: String,
    #[serde(flatten)]
    tests: kgdiag::stats::GroupTests,
}

#[derive(Serialize)]
struct QuadrantFile {
    #[serde(flatten)]
    report: kgdiag::stats::QuadrantReport,
}

fn boxplot_csv(records: &[SampleRecord]) -> String {
    let mut s = String::from("metric,group,n,min,q1,median,q3,max\n");
    for (metric, f) in [("ssr", (|r: &SampleRecord| r.ssr) as fn(&SampleRecord) -> f64), ("sas", |r| r.sas)] {
        for (group, halluc) in [("hallucinated", true), ("truthful", false)] {
            let v: Vec<f64> = records.iter().filter(|r| r.label.is_hallucinated() == halluc).map(f).collect();
            if let Some(BoxStats { n, min, q1, median, q3, max, .. }) = box_stats(group, &v) {
                let _ = writeln!(s, "{metric},{group},{n},{min},{q1},{median},{q3},{max}");
            }
        }
    }
    s
}

pub fn analyze(cfg: &RunConfig) -> CliResult<String> {
    let prepared = load_prepared(cfg)?;
    let bundles = load_bundles(cfg, &prepared)?;
    let samples = load_sample_map(cfg)?;
    let mut records: Vec<SampleRecord> = prepared
        .par_iter()
        .zip(&bundles)
        .map(|(p, b)| {
            let s = sample_for(&samples, &p.layout.sample_id)?;
            Ok(analyze_sample(b, p, s, cfg.scope, cfg.label_threshold, &cfg.dataset_tag)
                .context(|| p.layout.sample_id.clone())?
                .record)
        })
        .collect::<CliResult<_>>()?;
    if let Some(path) = &cfg.nli_scores {
        let p = cfg.require(&Some(path.clone()), "nli_scores")?.to_path_buf();
        let rows: Vec<NliRow> = read_jsonl(&p).context(|| p.display().to_string())?;
        let by_id: HashMap<String, f64> = rows.into_iter().map(|r| (r.sample_id, r.score)).collect();
        for r in &mut records {
            if let Some(&v) = by_id.get(&r.sample_id) {
                r.baseline_scores.insert(kgdiag::detector::baselines::NLI_CONTRADICTION.into(), v);
            }
        }
    }
    let (quadrants, assigned) = quadrant_analysis(&records).context(|| "quadrant analysis".into())?;
    for (r, q) in records.iter_mut().zip(assigned) {
        r.quadrant = Some(q);
    }
    let mut w = writer(cfg, "analyze")?;
    w.jsonl(RECORDS, &records)?;
    w.json(
        "ttest.json",
        &TTestReport { groups: "a = hallucinated, b = truthful".into(), tests: group_tests(&records, cfg.welch) },
    )?;
    w.json("correlations.json", &correlation_report(&records))?;
    w.json("quadrants.json", &QuadrantFile { report: quadrants })?;
    w.text("boxplot.csv", &boxplot_csv(&records))?;
    w.finish()?;
    let halluc = records.iter().filter(|r| r.label.is_hallucinated()).count();
    Ok(format!("analyze: {} records, {} hallucinated", records.len(), halluc))
}

fn load_records(cfg: &RunConfig, path: Option<&Path>) -> CliResult<Vec<SampleRecord>> {
    let p = path.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join(RECORDS));
    if !p.exists() {
        return Err(CliError::Data(format!("{} missing; run `analyze` first", p.display())));
    }
    read_jsonl(&p).context(|| p.display().to_string())
}

fn detector_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig { seed: derive_seed(cfg.seed, "detector", 0), ..cfg.detector.clone() }
}

#[derive(Serialize)]
struct ValidationReport<'a> {
    train_size: usize,
    validation_size: usize,
    validation: &'a EvalReport,
}

pub fn detect_train(cfg: &RunConfig, records: Option<&Path>) -> CliResult<String> {
    let recs = load_records(cfg, records)?;
    let t = train(&recs, &[Feature::Ssr, Feature::Sas], &detector_config(cfg))?;
    let mut w = writer(cfg, "detect-train")?;
    w.json(MODEL, &t.model)?;
    w.json(
        "validation.json",
        &ValidationReport {
            train_size: t.split.train.len(),
            validation_size: t.split.validation.len(),
            validation: &t.validation,
        },
    )?;
    w.finish()?;
    Ok(format!("detect-train: validation AUC {:.4}, threshold {:.4}", t.validation.auc, t.model.threshold))
}

#[derive(Serialize)]
struct EvalFile<'a> {
    records: usize,
    positive_class: &'static str,
    detector: &'a EvalReport,
    baselines: &'a BTreeMap<String, EvalReport>,
    notes: Vec<&'static str>,
}

fn csv_row(s: &mut String, name: &str, r: &EvalReport) {
    let _ = writeln!(
        s,
        "{name},{},{},{},{},{},{}",
        r.auc, r.f1_class1, r.f1_macro, r.precision_class1, r.recall_class1, r.threshold
    );
}

pub fn detect_eval(cfg: &RunConfig, model: Option<&Path>, records: Option<&Path>) -> CliResult<String> {
    let model_path = model.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join(MODEL));
    let text =
        std::fs::read_to_string(&model_path).map_err(|e| CliError::Data(format!("{}: {e}", model_path.display())))?;
    let m = DetectorModel::from_json(&text).context(|| model_path.display().to_string())?;
    let recs = load_records(cfg, records)?;
    let det = evaluate(&m, &recs)?;
    let baselines = evaluate_baselines(&recs)?;
    let mut csv = String::from("method,auc,f1_class1,f1_macro,precision_class1,recall_class1,threshold\n");
    csv_row(&mut csv, "ssr+sas", &det);
    for (name, r) in &baselines {
        csv_row(&mut csv, name, r);
    }
    let mut w = writer(cfg, "detect-eval")?;
    w.json(
        "eval.json",
        &EvalFile {
            records: recs.len(),
            positive_class: "hallucinated",
            detector: &det,
            baselines: &baselines,
            notes: vec![
                "baseline thresholds are chosen on the evaluated records by macro-F1",
                "bertscore_like matches answer hidden states against unit embeddings from the bundle",
            ],
        },
    )?;
    w.text("eval.csv", &csv)?;
    w.finish()?;
    Ok(format!("detect-eval: AUC {:.4}, F1(class 1) {:.4}", det.auc, det.f1_class1))
}

pub fn ablate(cfg: &RunConfig, records: Option<&Path>) -> CliResult<String> {
    let recs = load_records(cfg, records)?;
    let report = ablation(&recs, &detector_config(cfg))?;
    let mut w = writer(cfg, "ablate")?;
    w.json("ablation.json", &report)?;
    w.finish()?;
    let summary: Vec<String> =
        FEATURE_SETS.iter().map(|(n, _)| format!("{n} {:.4}", report.auc(n).unwrap_or(f64::NAN))).collect();
    Ok(format!("ablate: {}", summary.join(", ")))
}

/// Rebuild the planted generator inputs for a bundle produced by `synth`.
fn planted_spec(bundle: &TraceBundle) -> Option<PlantedSpec> {
    if bundle.metadata.model != "planted" {
        return None;
    }
    let core_mass = bundle.metadata.extra.get("planted_core_mass")?.parse().ok()?;
    let sas = compute_sas(bundle, &bundle.unit_ids).ok()?;
    if !sas.excluded_tokens.is_empty() {
        return None;
    }
    Some(PlantedSpec {
        core_mass,
        token_sas: sas.token_sas,
        layers: bundle.layers,
        heads: bundle.heads,
        source_len: bundle.source_len,
        hidden_dim: bundle.hidden_dim,
        seed: 0,
        generated_text: bundle.generated_text.clone(),
    })
}

#[derive(Serialize)]
struct RobustnessFile {
    trace_source: &'static str,
    permutation: kgdiag::stats::robustness::PermutationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    support_set_variants: Option<kgdiag::stats::VariantReport>,
}

pub fn robustness(cfg: &RunConfig) -> CliResult<String> {
    let prepared = load_prepared(cfg)?;
    let bundles = load_bundles(cfg, &prepared)?;
    let specs: Option<HashMap<String, PlantedSpec>> =
        bundles.iter().map(|b| planted_spec(b).map(|s| (b.sample_id.clone(), s))).collect();
    let (source, kind): (Box<dyn TraceSource>, &'static str) = match specs {
        Some(specs) => {
            (Box::new(PlantedTraceSource { specs, position_noise: cfg.robustness.position_noise }), "planted")
        }
        None => {
            let mut rec = RecordedTraces::default();
            for (p, b) in prepared.iter().zip(&bundles) {
                rec.insert(&p.layout, b.clone());
            }
            (Box::new(rec), "recorded")
        }
    };
    let samples: Vec<(PromptLayout, CueSets)> = prepared.into_iter().map(|p| (p.layout, p.cues)).collect();
    let seeds: Vec<u64> =
        (0..cfg.robustness.permutations as u64).map(|k| derive_seed(cfg.seed, "permutation", k)).collect();
    let permutation = permutation_robustness(source.as_ref(), &samples, &seeds, cfg.scope)?;
    let variants = if cfg.robustness.variants.is_empty() {
        None
    } else {
        let sets = cfg
            .robustness
            .variants
            .iter()
            .map(|v| {
                let recs: Vec<SampleRecord> = read_jsonl(&v.records).context(|| v.records.display().to_string())?;
                Ok((v.name.clone(), recs))
            })
            .collect::<CliResult<Vec<_>>>()?;
        Some(support_set_variants(&sets)?)
    };
    let rho = permutation.rho;
    let mut w = writer(cfg, "robustness")?;
    w.json("robustness.json", &RobustnessFile { trace_source: kind, permutation, support_set_variants: variants })?;
    w.finish()?;
    Ok(format!("robustness: rho {rho:.4} over {} seeds", seeds.len()))
}

#[derive(Serialize)]
struct SynthReport<'a> {
    spec: &'a kgdiag::synth::SynthSpec,
    bayes_auc: Option<f64>,
    hallucinated: usize,
}

pub fn synth(cfg: &RunConfig) -> CliResult<String> {
    let mut spec = cfg.synth.clone();
    spec.seed = cfg.seed;
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let corpus = generate_corpus(&spec)?;
    let traces = cfg.traces_dir();
    corpus
        .bundles
        .par_iter()
        .map(|b| write_bundle(b, &traces.join(&b.sample_id)))
        .collect::<kgdiag::Result<()>>()
        .map_err(|e| CliError::Internal(e.to_string()))?;

    let mut w = writer(cfg, "synth")?;
    w.text("graph.json", &(serde_json::to_string_pretty(&corpus.graph.to_json()).expect("graph json") + "\n"))?;
    w.jsonl("samples.jsonl", &corpus.samples)?;
    write_prepared(&mut w, &corpus.prepared, &[])?;
    w.jsonl("synth_truth.jsonl", &corpus.truth)?;
    let bayes = bayes_auc(&spec.rule, spec.sas_range, 1024).ok();
    let hallucinated = corpus.truth.iter().filter(|t| t.hallucinated).count();
    w.json("synth.json", &SynthReport { spec: &spec, bayes_auc: bayes, hallucinated })?;
    let downstream = RunConfig {
        graph: Some("graph.json".into()),
        samples: Some("samples.jsonl".into()),
        traces: Some(cfg.traces.clone().unwrap_or_else(|| PathBuf::from("traces"))),
        output_dir: ".".into(),
        dataset_tag: if cfg.dataset_tag.is_empty() { "synthetic".into() } else { cfg.dataset_tag.clone() },
        synth: spec.clone(),
        ..cfg.clone()
    };
    w.text("config.json", &(serde_json::to_string_pretty(&downstream).expect("config json") + "\n"))?;
    w.finish()?;
    Ok(format!(
        "synth: {} samples ({} hallucinated), Bayes AUC {} -> {}",
        corpus.samples.len(),
        hallucinated,
        bayes.map_or("n/a".into(), |b| format!("{b:.4}")),
        cfg.output_dir.display()
    ))
}
