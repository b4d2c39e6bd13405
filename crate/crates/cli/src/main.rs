// SPDX-License-Identifier: Apache-2.0

//! `kgdiag` command-line driver.

mod artifacts;
mod commands;
mod config;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use fail::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "kgdiag", version, about = "Hallucination diagnostics over linearized knowledge")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

/// Every flag overrides the matching config field.
#[derive(Args, Default)]
struct Common {
    /// JSON run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Directory for every output file.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Root seed; per-stage seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Knowledge graph, triples TSV or JSON.
    #[arg(long, global = true)]
    graph: Option<PathBuf>,
    /// QA samples, JSON lines.
    #[arg(long, global = true)]
    samples: Option<PathBuf>,
    /// Tables, JSON lines, one per line.
    #[arg(long, global = true)]
    tables: Option<PathBuf>,
    /// Directory with one trace bundle per sample id.
    #[arg(long, global = true)]
    traces: Option<PathBuf>,
    /// External contradiction scores, JSON lines of {sample_id, score}.
    #[arg(long, global = true)]
    nli_scores: Option<PathBuf>,
    /// full-sequence | knowledge-region
    #[arg(long, global = true)]
    scope: Option<String>,
    /// Prompt template id for graph samples.
    #[arg(long, global = true)]
    template: Option<String>,
    /// Token-F1 at or above which an answer counts as truthful.
    #[arg(long, global = true)]
    label_threshold: Option<f64>,
    /// Longest question-to-answer path considered.
    #[arg(long, global = true)]
    max_hops: Option<usize>,
    /// Size cap for the trimmed subgraph.
    #[arg(long, global = true)]
    k_subgraph: Option<usize>,
    /// Size cap for the support set.
    #[arg(long, global = true)]
    k_support: Option<usize>,
    /// Support units admitted per core entity.
    #[arg(long, global = true)]
    per_entity_cap: Option<usize>,
    /// gbdt | logistic
    #[arg(long, global = true)]
    model_kind: Option<String>,
    /// Boosting rounds.
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Boosting shrinkage.
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    /// Share of records used for training.
    #[arg(long, global = true)]
    train_fraction: Option<f64>,
    /// Tag copied into every record.
    #[arg(long, global = true)]
    dataset_tag: Option<String>,
    /// Use Welch's t-test instead of the pooled-variance test.
    #[arg(long, global = true)]
    welch: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Arbitrary override, e.g. `--set detector.boost.max_depth=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Mine cues and render prompts for every sample.
    Prepare,
    /// Generate a synthetic corpus with planted traces.
    Synth {
        /// JSON synthesis spec; replaces the config's `synth` section.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Compute SSR and SAS per sample.
    Metrics,
    /// Label generations as truthful or hallucinated.
    Label,
    /// Build records and the statistics reports.
    Analyze,
    /// Train the two-feature detector.
    DetectTrain {
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Evaluate a trained detector and the baselines.
    DetectEval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Compare single-feature and two-feature detectors.
    Ablate {
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Permutation and support-set robustness checks.
    Robustness,
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn overrides(c: &Common) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut path = |key: &str, v: &Option<PathBuf>| {
        if let Some(p) = v {
            out.push((key.to_string(), quoted(&p.to_string_lossy())));
        }
    };
    path("output_dir", &c.output_dir);
    path("graph", &c.graph);
    path("samples", &c.samples);
    path("tables", &c.tables);
    path("traces", &c.traces);
    path("nli_scores", &c.nli_scores);
    let strings = [
        ("scope", &c.scope),
        ("template", &c.template),
        ("detector.kind", &c.model_kind),
        ("dataset_tag", &c.dataset_tag),
    ];
    for (k, v) in strings {
        if let Some(v) = v {
            out.push((k.to_string(), quoted(v)));
        }
    }
    let numbers = [
        ("seed", c.seed.map(|v| v.to_string())),
        ("label_threshold", c.label_threshold.map(|v| v.to_string())),
        ("cue.max_hops", c.max_hops.map(|v| v.to_string())),
        ("cue.k_subgraph", c.k_subgraph.map(|v| v.to_string())),
        ("cue.k_support", c.k_support.map(|v| v.to_string())),
        ("cue.per_entity_cap", c.per_entity_cap.map(|v| v.to_string())),
        ("detector.boost.rounds", c.rounds.map(|v| v.to_string())),
        ("detector.boost.learning_rate", c.learning_rate.map(|v| v.to_string())),
        ("detector.train_fraction", c.train_fraction.map(|v| v.to_string())),
    ];
    out.extend(numbers.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    if c.welch {
        out.push(("welch".into(), "true".into()));
    }
    for kv in &c.set {
        let (k, v) =
            kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        out.push((k.trim().to_string(), v.to_string()));
    }
    Ok(out)
}

fn run(cli: Cli) -> CliResult<String> {
    let mut ov = overrides(&cli.common)?;
    if let Command::Synth { spec: Some(spec) } = &cli.command {
        let text = std::fs::read_to_string(spec)
            .map_err(|e| CliError::Usage(format!("cannot read spec {}: {e}", spec.display())))?;
        ov.insert(0, ("synth".into(), text));
    }
    let cfg = RunConfig::load(cli.common.config.as_deref(), &ov)?;
    if let Some(j) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    match &cli.command {
        Command::Prepare => commands::prepare(&cfg),
        Command::Synth { .. } => commands::synth(&cfg),
        Command::Metrics => commands::metrics(&cfg),
        Command::Label => commands::label(&cfg),
        Command::Analyze => commands::analyze(&cfg),
        Command::DetectTrain { records } => commands::detect_train(&cfg, records.as_deref()),
        Command::DetectEval { model, records } => commands::detect_eval(&cfg, model.as_deref(), records.as_deref()),
        Command::Ablate { records } => commands::ablate(&cfg, records.as_deref()),
        Command::Robustness => commands::robustness(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(summary)) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("kgdiag: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(3),
    }
}
