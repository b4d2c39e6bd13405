// SPDX-License-Identifier: Apache-2.0

//! Structural Shortcut Reliance and Semantic Alignment Score.
//!
//! SSR is the mean over layers, heads and answer rows of the attention mass
//! on core-cue tokens minus the mass on the complement. SAS is the mean over
//! answer tokens of the best cosine between the token's hidden state and any
//! supporting-context unit embedding. All accumulation is in f64.

use serde::{Deserialize, Serialize};

use crate::cueminer::CueSets;
use crate::error::{Error, Result};
use crate::kgstore::UnitId;
use crate::linearizer::{PromptLayout, Span};
use crate::tracefmt::TraceBundle;

/// Which source tokens form the complement of the core cues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// Every non-core source token; row masses sum to one.
    #[default]
    FullSequence,
    /// Only tokens of non-core knowledge units; row masses are renormalized
    /// over core plus complement before differencing.
    KnowledgeRegion,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPartition {
    pub s_tokens: Vec<usize>,
    pub sbar_tokens: Vec<usize>,
    pub scope: Scope,
    pub source_len: usize,
}

impl TokenPartition {
    /// `+1` for core tokens, `-1` for complement tokens, `0` otherwise.
    fn signs(&self) -> Vec<i8> {
        let mut s = vec![0i8; self.source_len];
        for &j in &self.s_tokens {
            s[j] = 1;
        }
        for &j in &self.sbar_tokens {
            s[j] = -1;
        }
        s
    }
}

/// Assign source tokens to the core set by character-interval overlap with
/// the spans of `core` units.
pub fn build_partition(
    layout: &PromptLayout,
    core: &[UnitId],
    offsets: &[(usize, usize)],
    scope: Scope,
) -> Result<TokenPartition> {
    let core_set: std::collections::HashSet<UnitId> = core.iter().copied().collect();
    // (span, is_core), sorted by start; unit spans never overlap
    let mut spans: Vec<(Span, bool)> =
        layout.units.iter().filter(|u| u.start < u.end).map(|u| (u.span(), core_set.contains(&u.unit))).collect();
    spans.sort_by_key(|(s, _)| s.start);

    let mut s_tokens = Vec::new();
    let mut sbar_tokens = Vec::new();
    let mut first = 0;
    for (j, &(start, end)) in offsets.iter().enumerate() {
        let tok = Span::new(start, end);
        while first < spans.len() && spans[first].0.end <= start {
            first += 1;
        }
        let (mut hits_core, mut hits_other) = (false, false);
        if !tok.is_empty() {
            for (span, is_core) in spans[first..].iter().take_while(|(s, _)| s.start < end) {
                if span.overlaps(&tok) {
                    if *is_core {
                        hits_core = true;
                    } else {
                        hits_other = true;
                    }
                }
            }
        }
        if hits_core {
            s_tokens.push(j);
        } else if scope == Scope::FullSequence || hits_other {
            sbar_tokens.push(j);
        }
    }
    if s_tokens.is_empty() {
        return Err(Error::EmptyCore);
    }
    Ok(TokenPartition { s_tokens, sbar_tokens, scope, source_len: offsets.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsrResult {
    pub ssr: f64,
    pub per_layer: Vec<f64>,
}

pub fn compute_ssr(bundle: &TraceBundle, part: &TokenPartition) -> Result<SsrResult> {
    if part.source_len != bundle.source_len {
        return Err(Error::Shape(format!(
            "partition covers {} tokens, bundle has {}",
            part.source_len, bundle.source_len
        )));
    }
    if part.s_tokens.is_empty() {
        return Err(Error::EmptyCore);
    }
    let signs = part.signs();
    let rows_per_layer = (bundle.heads * bundle.answer_len) as f64;
    let mut per_layer = Vec::with_capacity(bundle.layers);
    let mut total = 0.0f64;
    for layer in 0..bundle.layers {
        let mut layer_sum = 0.0f64;
        for head in 0..bundle.heads {
            for row in 0..bundle.answer_len {
                let r = bundle.attention_row(layer, head, row);
                let diff = match part.scope {
                    Scope::FullSequence => r.iter().zip(&signs).map(|(&a, &s)| s as f64 * a as f64).sum::<f64>(),
                    Scope::KnowledgeRegion => {
                        let (mut ms, mut mbar) = (0.0f64, 0.0f64);
                        for (&a, &s) in r.iter().zip(&signs) {
                            match s {
                                1 => ms += a as f64,
                                -1 => mbar += a as f64,
                                _ => {}
                            }
                        }
                        let denom = ms + mbar;
                        if denom <= 0.0 {
                            return Err(Error::ZeroRegionMass { layer, head, row });
                        }
                        (ms - mbar) / denom
                    }
                };
                layer_sum += diff;
            }
        }
        total += layer_sum;
        per_layer.push(layer_sum / rows_per_layer);
    }
    let ssr = total / (bundle.layers as f64 * rows_per_layer);
    Ok(SsrResult { ssr: ssr.clamp(-1.0, 1.0), per_layer })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SasResult {
    pub sas: f64,
    /// Scores of the answer tokens that were not excluded.
    pub token_sas: Vec<f64>,
    /// Answer tokens dropped for having a zero-norm hidden state.
    pub excluded_tokens: Vec<usize>,
    /// Support units dropped for having a zero-norm embedding.
    pub degenerate_units: Vec<UnitId>,
}

fn normalized(v: &[f32]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| x as f64 / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-token max cosine against the embeddings of `support`, and its mean.
pub fn compute_sas(bundle: &TraceBundle, support: &[UnitId]) -> Result<SasResult> {
    let mut refs = Vec::with_capacity(support.len());
    let mut degenerate_units = Vec::new();
    for &u in support {
        let g = bundle.embedding_of(u).ok_or(Error::MissingEmbedding(u.0))?;
        match normalized(g) {
            Some(v) => refs.push(v),
            None => degenerate_units.push(u),
        }
    }
    if refs.is_empty() {
        return Err(Error::DegenerateEmbedding);
    }
    let mut token_sas = Vec::with_capacity(bundle.answer_len);
    let mut excluded_tokens = Vec::new();
    for t in 0..bundle.answer_len {
        match normalized(bundle.hidden(t)) {
            Some(h) => {
                let best = refs.iter().map(|g| dot(&h, g)).fold(f64::NEG_INFINITY, f64::max);
                token_sas.push(best.clamp(-1.0, 1.0));
            }
            None => excluded_tokens.push(t),
        }
    }
    if token_sas.is_empty() {
        return Err(Error::DegenerateEmbedding);
    }
    let sas = token_sas.iter().sum::<f64>() / token_sas.len() as f64;
    Ok(SasResult { sas, token_sas, excluded_tokens, degenerate_units })
}

/// SSR and SAS for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub sample_id: String,
    pub ssr: f64,
    pub sas: f64,
    pub token_sas: Vec<f64>,
    pub per_layer_ssr: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate_units: Vec<UnitId>,
}

pub fn compute_metrics(
    bundle: &TraceBundle,
    layout: &PromptLayout,
    cues: &CueSets,
    scope: Scope,
) -> Result<MetricResult> {
    let part = build_partition(layout, &cues.core, &bundle.token_offsets, scope)?;
    let ssr = compute_ssr(bundle, &part)?;
    let sas = compute_sas(bundle, &cues.support)?;
    Ok(MetricResult {
        sample_id: bundle.sample_id.clone(),
        ssr: ssr.ssr,
        sas: sas.sas,
        token_sas: sas.token_sas,
        per_layer_ssr: ssr.per_layer,
        excluded_tokens: sas.excluded_tokens,
        degenerate_units: sas.degenerate_units,
    })
}
