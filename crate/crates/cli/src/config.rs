// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

use kgdiag::cueminer::CueConfig;
use kgdiag::detector::TrainConfig;
use kgdiag::labeler::DEFAULT_F1_THRESHOLD;
use kgdiag::metrics::Scope;
use kgdiag::synth::SynthSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::fail::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    /// Number of permutation seeds, derived from the run seed.
    pub permutations: usize,
    pub position_noise: f64,
    /// Record files (`records.jsonl` layout) for support-set variants.
    pub variants: Vec<VariantSource>,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig { permutations: 5, position_noise: 0.0, variants: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSource {
    pub name: String,
    pub records: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub graph: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub tables: Option<PathBuf>,
    /// Directory holding one bundle directory per sample id.
    /// Defaults to `<output_dir>/traces`.
    pub traces: Option<PathBuf>,
    /// Optional JSON-lines file of `{"sample_id", "score"}` contradiction
    /// scores merged into the baselines.
    pub nli_scores: Option<PathBuf>,
    pub cue: CueConfig,
    pub template: String,
    pub table_template: String,
    pub scope: Scope,
    pub label_threshold: f64,
    pub welch: bool,
    pub detector: TrainConfig,
    pub robustness: RobustnessConfig,
    pub synth: SynthSpec,
    pub dataset_tag: String,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            graph: None,
            samples: None,
            tables: None,
            traces: None,
            nli_scores: None,
            cue: CueConfig::default(),
            template: "kg-v1".into(),
            table_template: "table-v1".into(),
            scope: Scope::FullSequence,
            label_threshold: DEFAULT_F1_THRESHOLD,
            welch: false,
            detector: TrainConfig::default(),
            robustness: RobustnessConfig::default(),
            synth: SynthSpec::default(),
            dataset_tag: String::new(),
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

/// Set `path` (dot-separated keys) in a JSON object tree to `raw`, parsed
/// as JSON when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> CliResult<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(CliError::Usage(format!("bad override key '{path}'")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("override '{path}': '{}' is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    unreachable!("split yields at least one key")
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Load an optional config file, then apply `key=value` overrides.
    /// Relative paths in the file resolve against the file's directory.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> CliResult<Self> {
        let mut tree = match file {
            Some(f) => {
                let text = std::fs::read_to_string(f)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", f.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", f.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
        };
        if let Some(f) = file {
            let base = f.parent().map(Path::to_path_buf).unwrap_or_default();
            let mut cfg: RunConfig = serde_json::from_value(tree.clone())
                .map_err(|e| CliError::Usage(format!("config {}: {e}", f.display())))?;
            for p in [&mut cfg.graph, &mut cfg.samples, &mut cfg.tables, &mut cfg.traces, &mut cfg.nli_scores] {
                resolve(&base, p);
            }
            for v in &mut cfg.robustness.variants {
                let mut p = Some(v.records.clone());
                resolve(&base, &mut p);
                v.records = p.unwrap();
            }
            if cfg.output_dir.is_relative() {
                cfg.output_dir = base.join(&cfg.output_dir);
            }
            tree = serde_json::to_value(cfg).expect("config serializes");
        }
        for (k, v) in overrides {
            apply_override(&mut tree, k, v)?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |e: kgdiag::Error| CliError::Usage(e.to_string());
        self.cue.validate().map_err(usage)?;
        self.detector.validate().map_err(usage)?;
        if !(0.0..=1.0).contains(&self.label_threshold) {
            return Err(CliError::Usage(format!("label_threshold {} not in [0, 1]", self.label_threshold)));
        }
        for id in [&self.template, &self.table_template] {
            if kgdiag::linearizer::PromptTemplate::by_id(id).is_none() {
                return Err(CliError::Usage(format!("unknown template '{id}'")));
            }
        }
        Ok(())
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.traces.clone().unwrap_or_else(|| self.output_dir.join("traces"))
    }

    /// Hex SHA-256 of the canonical JSON form of the resolved config.
    /// Paths inside the output directory are hashed relative to it, so the
    /// same run written to two locations gets the same hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        let out = std::mem::take(&mut c.output_dir);
        let rel = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if let Ok(r) = path.strip_prefix(&out) {
                    *path = r.to_path_buf();
                }
            }
        };
        for p in [&mut c.graph, &mut c.samples, &mut c.tables, &mut c.traces, &mut c.nli_scores] {
            rel(p);
        }
        for v in &mut c.robustness.variants {
            if let Ok(r) = v.records.strip_prefix(&out) {
                v.records = r.to_path_buf();
            }
        }
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Return `path`, or a usage error naming the missing `field`.
    pub fn require<'a>(&self, path: &'a Option<PathBuf>, field: &str) -> CliResult<&'a Path> {
        let p = path
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("config field '{field}' is required for this command")))?;
        if !p.exists() {
            return Err(CliError::Usage(format!("{field}: {} does not exist", p.display())));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_override_creates_nested_values() {
        let mut v = serde_json::json!({"detector": {"boost": {"rounds": 200}}});
        apply_override(&mut v, "detector.boost.rounds", "10").unwrap();
        apply_override(&mut v, "dataset_tag", "metaqa").unwrap();
        assert_eq!(v["detector"]["boost"]["rounds"], 10);
        assert_eq!(v["dataset_tag"], "metaqa");
    }

    #[test]
    fn unknown_fields_are_usage_errors() {
        let err = RunConfig::load(None, &[("no_such_field".into(), "1".into())]).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
