// SPDX-License-Identifier: Apache-2.0

//! Uncertainty and similarity scores computed from the same trace bundle.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kgstore::UnitId;
use crate::tracefmt::TraceBundle;

/// Floor applied to chosen-token probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

pub const PERPLEXITY: &str = "perplexity";
pub const TOKEN_CONFIDENCE: &str = "token_confidence";
pub const MAX_TOKEN_PROBABILITY: &str = "max_token_probability";
pub const EMBEDDING_DIVERGENCE: &str = "embedding_divergence";
pub const BERTSCORE_LIKE: &str = "bertscore_like";
pub const NLI_CONTRADICTION: &str = "nli_contradiction";

/// Sign that turns a baseline into a hallucination score (higher means
/// more likely hallucinated). Unknown names are taken as already oriented.
pub fn orientation(name: &str) -> f64 {
    match name {
        TOKEN_CONFIDENCE | MAX_TOKEN_PROBABILITY | BERTSCORE_LIKE => -1.0,
        _ => 1.0,
    }
}

fn unit(v: &[f32]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    (norm > 0.0).then(|| v.iter().map(|&x| f64::from(x) / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f32]>, d: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; d];
    let mut n = 0usize;
    for r in rows {
        for (a, &x) in acc.iter_mut().zip(r) {
            *a += f64::from(x);
        }
        n += 1;
    }
    acc.iter().map(|a| (a / n.max(1) as f64) as f32).collect()
}

/// All trace-derived baselines for one bundle. `support` selects the unit
/// embeddings used by the similarity scores.
pub fn baseline_scores(bundle: &TraceBundle, support: &[UnitId]) -> Result<BTreeMap<String, f64>> {
    let t = bundle.answer_len;
    if t == 0 || bundle.step_probs.len() != t {
        return Err(Error::Shape(format!("{} step probabilities for {} answer tokens", bundle.step_probs.len(), t)));
    }
    let mut out = BTreeMap::new();
    let nll = bundle.step_probs.iter().map(|s| -s.chosen.max(PROB_FLOOR).ln()).sum::<f64>() / t as f64;
    out.insert(PERPLEXITY.to_string(), nll.exp());
    let conf = bundle.step_probs.iter().map(|s| s.chosen).sum::<f64>() / t as f64;
    out.insert(TOKEN_CONFIDENCE.to_string(), conf);
    let maxp = bundle.step_probs.iter().map(|s| s.chosen).fold(0.0, f64::max);
    out.insert(MAX_TOKEN_PROBABILITY.to_string(), maxp);

    let units = support
        .iter()
        .map(|&u| bundle.embedding_of(u).ok_or(Error::MissingEmbedding(u.0)))
        .collect::<Result<Vec<_>>>()?;
    let d = bundle.hidden_dim;
    let h_mean = mean_rows((0..t).map(|i| bundle.hidden(i)), d);
    let g_mean = mean_rows(units.iter().copied(), d);
    let (Some(h), Some(g)) = (unit(&h_mean), unit(&g_mean)) else {
        return Err(Error::DegenerateEmbedding);
    };
    out.insert(EMBEDDING_DIVERGENCE.to_string(), 1.0 - dot(&h, &g));

    let hs: Vec<Vec<f64>> = (0..t).filter_map(|i| unit(bundle.hidden(i))).collect();
    let gs: Vec<Vec<f64>> = units.iter().filter_map(|u| unit(u)).collect();
    if hs.is_empty() || gs.is_empty() {
        return Err(Error::DegenerateEmbedding);
    }
    let sim: Vec<Vec<f64>> = hs.iter().map(|h| gs.iter().map(|g| dot(h, g)).collect()).collect();
    let precision =
        sim.iter().map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / hs.len() as f64;
    let recall = (0..gs.len()).map(|j| sim.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max)).sum::<f64>()
        / gs.len() as f64;
    let f = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    out.insert(BERTSCORE_LIKE.to_string(), f);
    Ok(out)
}
