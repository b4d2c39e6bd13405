// SPDX-License-Identifier: Apache-2.0

//! Output files. JSON reports carry a `meta` block; JSON-lines, CSV and
//! text outputs are listed with the same metadata in `artifacts.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kgdiag::tracefmt::write_atomic;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fail::{CliError, CliResult};

pub const SIDECAR: &str = "artifacts.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    #[serde(flatten)]
    pub meta: Meta,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    meta: &'a Meta,
    #[serde(flatten)]
    body: &'a T,
}

/// Writes the outputs of one stage into the output directory.
pub struct Writer {
    dir: PathBuf,
    meta: Meta,
    listed: BTreeMap<String, FileEntry>,
}

fn internal(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Internal(format!("writing {}: {e}", path.display()))
}

impl Writer {
    pub fn new(dir: &Path, stage: &str, config_hash: &str, seed: u64) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| internal(dir, e))?;
        Ok(Writer {
            dir: dir.to_path_buf(),
            meta: Meta {
                tool: "kgdiag".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                stage: stage.into(),
                config_hash: config_hash.into(),
                seed,
            },
            listed: BTreeMap::new(),
        })
    }

    fn put(&mut self, name: &str, bytes: &[u8], list: bool) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| internal(parent, e))?;
        }
        write_atomic(&path, bytes).map_err(|e| internal(&path, e))?;
        if list {
            self.listed.insert(
                name.to_string(),
                FileEntry {
                    meta: self.meta.clone(),
                    sha256: hex::encode(Sha256::digest(bytes)),
                    bytes: bytes.len() as u64,
                },
            );
        }
        Ok(path)
    }

    /// A JSON report with an embedded `meta` block.
    pub fn json<T: Serialize>(&mut self, name: &str, body: &T) -> CliResult<PathBuf> {
        let env = Envelope { meta: &self.meta, body };
        let mut bytes = serde_json::to_vec_pretty(&env).map_err(|e| internal(Path::new(name), e))?;
        bytes.push(b'\n');
        self.put(name, &bytes, false)
    }

    pub fn jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> CliResult<PathBuf> {
        let mut bytes = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut bytes, r).map_err(|e| internal(Path::new(name), e))?;
            bytes.push(b'\n');
        }
        self.put(name, &bytes, true)
    }

    /// Text-like outputs (CSV, prompts) listed in the sidecar.
    pub fn text(&mut self, name: &str, text: &str) -> CliResult<PathBuf> {
        self.put(name, text.as_bytes(), true)
    }

    /// Merge this stage's listed files into `artifacts.json`.
    pub fn finish(self) -> CliResult<()> {
        if self.listed.is_empty() {
            return Ok(());
        }
        let path = self.dir.join(SIDECAR);
        let mut all: BTreeMap<String, FileEntry> = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        all.extend(self.listed);
        let mut bytes = serde_json::to_vec_pretty(&all).map_err(|e| internal(&path, e))?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes).map_err(|e| internal(&path, e))
    }
}
