// SPDX-License-Identifier: Apache-2.0

//! Contract for external trace exporters.
//!
//! An exporter runs a causal language model over `prompts.txt` /
//! `layouts.jsonl`, decodes greedily, and writes one bundle directory per
//! sample (see [`crate::tracefmt`]). This crate does not run models; it
//! describes the exporter's configuration and checks what it produced.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cueminer::CueSets;
use crate::error::{Error, Result};
use crate::linearizer::{char_slice, PromptLayout, Span};
use crate::tracefmt::TraceBundle;

/// Settings an exporter accepts; its command-line flags mirror these fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    /// Model identifier understood by the exporter's model loader.
    pub model: String,
    #[serde(default = "default_device")]
    pub device: String,
    /// Layer whose states feed SAS; negative values count from the top.
    #[serde(default = "default_hidden_layer")]
    pub hidden_layer_index: i64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    /// Directory holding `prompts.txt` and `layouts.jsonl`.
    pub prompts: PathBuf,
    pub output_dir: PathBuf,
}

fn default_device() -> String {
    "cpu".into()
}

fn default_hidden_layer() -> i64 {
    -2
}

fn default_max_new_tokens() -> usize {
    32
}

impl ExportConfig {
    /// Check the config against a model with `depth` transformer layers.
    pub fn validate(&self, depth: usize) -> Result<()> {
        let d = depth as i64;
        if !(-d..d).contains(&self.hidden_layer_index) {
            return Err(Error::Invalid(format!(
                "hidden_layer_index {} out of range for a {depth}-layer model",
                self.hidden_layer_index
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Invalid("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Check an exported bundle against the layout and cue sets it was
/// produced from. The bundle itself is assumed to have passed
/// [`TraceBundle::validate`].
///
/// * sample ids agree;
/// * the source tokens' character spans, concatenated, rebuild the prompt;
/// * there is exactly one unit embedding per support unit.
pub fn check_export(bundle: &TraceBundle, layout: &PromptLayout, cues: &CueSets) -> Result<()> {
    if bundle.sample_id != layout.sample_id || bundle.sample_id != cues.sample_id {
        return Err(Error::Invalid(format!(
            "bundle {} does not match layout {} / cues {}",
            bundle.sample_id, layout.sample_id, cues.sample_id
        )));
    }
    let mut rebuilt = String::with_capacity(layout.prompt_text.len());
    let mut next = 0;
    for (i, &(s, e)) in bundle.token_offsets.iter().enumerate() {
        // Zero-width tokens (e.g. BOS) may sit anywhere already covered.
        if s == e && s <= next {
            continue;
        }
        if s != next {
            return Err(Error::Bundle(format!("token {i} starts at char {s}, expected {next}")));
        }
        rebuilt.push_str(char_slice(&layout.prompt_text, Span::new(s, e)));
        next = e;
    }
    if rebuilt != layout.prompt_text {
        return Err(Error::Bundle(format!(
            "token offsets cover {} of {} prompt chars",
            rebuilt.chars().count(),
            layout.prompt_text.chars().count()
        )));
    }
    let have: BTreeSet<_> = bundle.unit_ids.iter().collect();
    let want: BTreeSet<_> = cues.support.iter().collect();
    if have != want || bundle.unit_ids.len() != cues.support.len() {
        return Err(Error::Bundle(format!(
            "bundle embeds {} units, support set has {}",
            bundle.unit_ids.len(),
            cues.support.len()
        )));
    }
    Ok(())
}
