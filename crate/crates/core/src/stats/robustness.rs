// SPDX-License-Identifier: Apache-2.0

//! Linearization-order and support-set sensitivity harnesses.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{roc_auc, spearman, SampleRecord};
use crate::cueminer::CueSets;
use crate::error::{Error, Result};
use crate::linearizer::{permute_layout, PromptLayout};
use crate::metrics::{build_partition, compute_ssr, Scope};
use crate::tracefmt::{generate_planted, PlantedSpec, TraceBundle};

/// Produces a trace for a (possibly re-ordered) prompt layout.
pub trait TraceSource {
    fn trace(&self, layout: &PromptLayout, cues: &CueSets) -> Result<TraceBundle>;
}

/// Regenerates planted traces. Attention depends only on which units are
/// core, so SSR is unchanged by re-ordering unless `position_noise` is set,
/// in which case the core mass shifts with where the first core unit sits.
#[derive(Debug, Clone, Default)]
pub struct PlantedTraceSource {
    pub specs: HashMap<String, PlantedSpec>,
    pub position_noise: f64,
}

impl TraceSource for PlantedTraceSource {
    fn trace(&self, layout: &PromptLayout, cues: &CueSets) -> Result<TraceBundle> {
        let spec = self
            .specs
            .get(&layout.sample_id)
            .ok_or_else(|| Error::Unsupported(format!("no planted spec for sample {}", layout.sample_id)))?;
        if self.position_noise == 0.0 {
            return generate_planted(spec, layout, cues);
        }
        let first_core = cues.core.iter().filter_map(|&u| layout.span_of(u)).map(|s| s.start).min().unwrap_or(0);
        let frac = first_core as f64 / layout.char_len().max(1) as f64;
        let mut shifted = spec.clone();
        shifted.core_mass = (spec.core_mass + self.position_noise * (frac - 0.5)).clamp(0.0, 1.0);
        generate_planted(&shifted, layout, cues)
    }
}

/// Serves recorded bundles for their original layouts only.
#[derive(Debug, Clone, Default)]
pub struct RecordedTraces {
    pub bundles: HashMap<String, (String, TraceBundle)>,
}

impl RecordedTraces {
    pub fn insert(&mut self, layout: &PromptLayout, bundle: TraceBundle) {
        self.bundles.insert(layout.sample_id.clone(), (layout.prompt_text.clone(), bundle));
    }
}

impl TraceSource for RecordedTraces {
    fn trace(&self, layout: &PromptLayout, _cues: &CueSets) -> Result<TraceBundle> {
        match self.bundles.get(&layout.sample_id) {
            Some((prompt, b)) if *prompt == layout.prompt_text => Ok(b.clone()),
            Some(_) => Err(Error::Unsupported(format!(
                "sample {}: recorded traces cannot be regenerated for a permuted layout; export them with the model",
                layout.sample_id
            ))),
            None => Err(Error::Unsupported(format!("no trace for sample {}", layout.sample_id))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub rho: f64,
    pub seeds: Vec<u64>,
    pub samples: usize,
    pub original_ssr: Vec<f64>,
    /// One SSR per (seed, sample), seed-major.
    pub permuted_ssr: Vec<f64>,
}

fn ssr_for(source: &dyn TraceSource, layout: &PromptLayout, cues: &CueSets, scope: Scope) -> Result<f64> {
    let bundle = source.trace(layout, cues)?;
    let part = build_partition(layout, &cues.core, &bundle.token_offsets, scope)?;
    Ok(compute_ssr(&bundle, &part)?.ssr)
}

/// Spearman correlation between original SSR and SSR recomputed after
/// shuffling the non-core lines of each prompt, pooled over `seeds`.
pub fn permutation_robustness(
    source: &dyn TraceSource,
    samples: &[(PromptLayout, CueSets)],
    seeds: &[u64],
    scope: Scope,
) -> Result<PermutationReport> {
    let original = samples.iter().map(|(l, c)| ssr_for(source, l, c, scope)).collect::<Result<Vec<_>>>()?;
    let mut xs = Vec::new();
    let mut permuted = Vec::new();
    for &seed in seeds {
        for (i, (layout, cues)) in samples.iter().enumerate() {
            let shuffled =
                permute_layout(layout, &cues.core_set(), seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
            permuted.push(ssr_for(source, &shuffled, cues, scope)?);
            xs.push(original[i]);
        }
    }
    Ok(PermutationReport {
        rho: spearman(&xs, &permuted)?,
        seeds: seeds.to_vec(),
        samples: samples.len(),
        original_ssr: original,
        permuted_ssr: permuted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variants: Vec<(String, f64)>,
    pub mean_auc: f64,
    /// Population standard deviation across variants.
    pub std_auc: f64,
}

/// Single-feature SSR AUC (hallucinated = positive) for each support-set
/// variant, plus their mean and population standard deviation.
pub fn support_set_variants(variants: &[(String, Vec<SampleRecord>)]) -> Result<VariantReport> {
    if variants.is_empty() {
        return Err(Error::Invalid("no variants given".into()));
    }
    let aucs = variants
        .iter()
        .map(|(name, recs)| {
            let scores: Vec<f64> = recs.iter().map(|r| r.ssr).collect();
            let pos: Vec<bool> = recs.iter().map(|r| r.label.is_hallucinated()).collect();
            Ok((name.clone(), roc_auc(&scores, &pos)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = aucs.len() as f64;
    let mean = aucs.iter().map(|(_, a)| a).sum::<f64>() / k;
    let var = aucs.iter().map(|(_, a)| (a - mean).powi(2)).sum::<f64>() / k;
    Ok(VariantReport { variants: aucs, mean_auc: mean, std_auc: var.sqrt() })
}
