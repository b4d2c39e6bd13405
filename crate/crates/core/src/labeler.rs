// SPDX-License-Identifier: Apache-2.0

//! SQuAD-style answer normalization, EM / token-F1 scoring and
//! hallucination labels.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const DEFAULT_F1_THRESHOLD: f64 = 0.3;
pub const ANSWER_PREFIX: &str = "ans:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Hallucinated,
    Truthful,
}

impl Label {
    pub fn is_hallucinated(self) -> bool {
        self == Label::Hallucinated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResult {
    pub em: bool,
    pub f1: f64,
    pub label: Label,
    pub extracted_answer: String,
}

/// Text after the first `ans:` (any case), up to the next newline, trimmed.
/// Falls back to the whole trimmed text when there is no prefix.
pub fn extract_answer(generated: &str) -> String {
    let lower = generated.to_ascii_lowercase();
    let rest = match lower.find(ANSWER_PREFIX) {
        // ASCII lowercasing keeps byte offsets aligned
        Some(pos) => &generated[pos + ANSWER_PREFIX.len()..],
        None => generated,
    };
    let rest = rest.trim_start();
    rest.split('\n').next().unwrap_or("").trim().to_string()
}

/// Lowercase, drop ASCII punctuation, remove the articles a/an/the, collapse
/// whitespace.
pub fn normalize(text: &str) -> String {
    let lowered: String = text.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
    lowered.split_whitespace().filter(|w| !matches!(*w, "a" | "an" | "the")).collect::<Vec<_>>().join(" ")
}

fn token_f1(pred: &str, gold: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &g {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Score `pred` against the gold answers; truthful iff EM or F1 ≥ threshold.
pub fn score_and_label<S: AsRef<str>>(pred: &str, golds: &[S], threshold: f64) -> LabelResult {
    let np = normalize(pred);
    let mut em = false;
    let mut f1 = 0.0f64;
    for g in golds {
        let ng = normalize(g.as_ref());
        em |= np == ng;
        f1 = f1.max(token_f1(&np, &ng));
    }
    let label = if em || f1 >= threshold { Label::Truthful } else { Label::Hallucinated };
    LabelResult { em, f1, label, extracted_answer: pred.to_string() }
}

/// Extract the answer from a generation and label it.
pub fn label_generation<S: AsRef<str>>(generated: &str, golds: &[S], threshold: f64) -> LabelResult {
    score_and_label(&extract_answer(generated), golds, threshold)
}
