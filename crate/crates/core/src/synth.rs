// SPDX-License-Identifier: Apache-2.0

//! Synthetic corpora with planted traces and a known labeling rule.
//!
//! Each sample owns a disjoint seven-entity component of one shared graph:
//!
//! ```text
//! q --r0--> m --r1--> a        (question-to-answer path, the core cues)
//! q --r2--> x,  m --r3--> y,  a --r4--> z,  x --r5--> w
//! ```
//!
//! A sample draws a core attention mass `p ~ U(0, 1)` and a SAS target
//! from `sas_range`. It is hallucinated with probability
//! `rule.probability(2p - 1, sas)`. Hallucinated samples generate the
//! distractor `w`, truthful ones the gold answer `a`, so the labeler
//! recovers the intended label from text.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cueminer::CueConfig;
use crate::error::{Error, Result};
use crate::kgstore::{Graph, QASample, Triple};
use crate::linearizer::PromptTemplate;
use crate::pipeline::{prepare_graph_sample, Prepared};
use crate::seeds::derive_seed;
use crate::tracefmt::{generate_planted, PlantedSpec, TraceBundle};

/// Lowest SAS target reachable by planted traces with several support units.
pub const MIN_PLANTED_SAS: f64 = -40.0 / 41.0;

const RELATIONS: [&str; 6] = ["directed by", "born in", "starred in", "written by", "located in", "released in"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GenerativeRule {
    /// `sigmoid(intercept + ssr_weight * ssr + sas_weight * sas)`.
    Logistic { intercept: f64, ssr_weight: f64, sas_weight: f64 },
    /// `high` when exactly one of `ssr > ssr_cut`, `sas > sas_cut` holds,
    /// `low` otherwise.
    Xor { ssr_cut: f64, sas_cut: f64, high: f64, low: f64 },
    /// Hallucinated exactly when `sas < sas_cut`.
    SasThreshold { sas_cut: f64 },
    /// Constant rate, independent of both features.
    Independent { rate: f64 },
}

impl Default for GenerativeRule {
    fn default() -> Self {
        GenerativeRule::Logistic { intercept: 0.5, ssr_weight: 2.5, sas_weight: -4.0 }
    }
}

impl GenerativeRule {
    pub fn probability(&self, ssr: f64, sas: f64) -> f64 {
        match *self {
            GenerativeRule::Logistic { intercept, ssr_weight, sas_weight } => {
                1.0 / (1.0 + (-(intercept + ssr_weight * ssr + sas_weight * sas)).exp())
            }
            GenerativeRule::Xor { ssr_cut, sas_cut, high, low } => {
                if (ssr > ssr_cut) != (sas > sas_cut) {
                    high
                } else {
                    low
                }
            }
            GenerativeRule::SasThreshold { sas_cut } => f64::from(u8::from(sas < sas_cut)),
            GenerativeRule::Independent { rate } => rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = match *self {
            GenerativeRule::Logistic { intercept, ssr_weight, sas_weight } => {
                intercept.is_finite() && ssr_weight.is_finite() && sas_weight.is_finite()
            }
            GenerativeRule::Xor { high, low, .. } => unit(high) && unit(low),
            GenerativeRule::SasThreshold { sas_cut } => sas_cut.is_finite(),
            GenerativeRule::Independent { rate } => unit(rate),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("bad generative rule {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub samples: usize,
    pub seed: u64,
    pub rule: GenerativeRule,
    pub sas_range: (f64, f64),
    pub layers: usize,
    pub heads: usize,
    pub source_len: usize,
    pub hidden_dim: usize,
    pub answer_tokens: usize,
    /// Half-width of the per-token spread around the sample's SAS target.
    pub token_spread: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            samples: 100,
            seed: 0,
            rule: GenerativeRule::default(),
            sas_range: (0.0, 1.0),
            layers: 2,
            heads: 2,
            source_len: 32,
            hidden_dim: 16,
            answer_tokens: 3,
            token_spread: 0.05,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.rule.validate()?;
        let (lo, hi) = self.sas_range;
        if !(MIN_PLANTED_SAS..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(Error::Invalid(format!(
                "sas_range ({lo}, {hi}) must satisfy {MIN_PLANTED_SAS:.6} <= lo <= hi <= 1"
            )));
        }
        if self.samples == 0 || self.answer_tokens == 0 {
            return Err(Error::Invalid("samples and answer_tokens must be positive".into()));
        }
        if self.token_spread.is_nan() || self.token_spread < 0.0 {
            return Err(Error::Invalid(format!("token_spread {} must be non-negative", self.token_spread)));
        }
        Ok(())
    }
}

/// What the generator intended for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub sample_id: String,
    pub core_mass: f64,
    pub ssr: f64,
    pub sas: f64,
    pub token_sas: Vec<f64>,
    pub hallucination_probability: f64,
    pub hallucinated: bool,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub graph: Graph,
    pub samples: Vec<QASample>,
    pub prepared: Vec<Prepared>,
    pub bundles: Vec<TraceBundle>,
    pub truth: Vec<SynthTruth>,
}

fn names(i: usize) -> [String; 7] {
    ["q", "m", "a", "x", "y", "z", "w"].map(|p| format!("{p}{i}"))
}

/// The shared graph: one disjoint component per sample.
pub fn synth_graph(samples: usize) -> Result<Graph> {
    let mut triples = Vec::with_capacity(samples * 6);
    let mut labels = Vec::with_capacity(samples * 7);
    for i in 0..samples {
        let [q, m, a, x, y, z, w] = names(i);
        for (k, (h, t)) in [(&q, &m), (&m, &a), (&q, &x), (&m, &y), (&a, &z), (&x, &w)].into_iter().enumerate() {
            triples.push(Triple::new(h.as_str(), format!("r{k}").as_str(), t.as_str()));
        }
        for (n, kind) in
            [(&q, "film"), (&m, "person"), (&a, "city"), (&x, "studio"), (&y, "year"), (&z, "country"), (&w, "town")]
        {
            labels.push((n.clone(), format!("{kind} {n}")));
        }
    }
    let rel_labels = RELATIONS.iter().enumerate().map(|(k, r)| (format!("r{k}"), r.to_string()));
    Graph::from_parts(triples, labels, rel_labels)
}

pub fn synth_sample(i: usize) -> QASample {
    let [q, _, a, ..] = names(i);
    QASample {
        sample_id: format!("syn-{i:06}"),
        question: format!("Where was the director of film {q} born?"),
        question_entities: [q].into(),
        gold_answers: [format!("city {a}")].into(),
        gold_answer_entities: [a].into(),
        table_id: None,
    }
}

/// Symmetric per-token targets with mean `sas`, kept inside the feasible
/// planted range.
fn token_targets(sas: f64, spread: f64, t: usize) -> Vec<f64> {
    if t == 1 {
        return vec![sas];
    }
    let d = spread.min(1.0 - sas).min(sas - MIN_PLANTED_SAS).max(0.0);
    (0..t).map(|k| sas + d * (2.0 * k as f64 / (t - 1) as f64 - 1.0)).collect()
}

/// Build the full corpus described by `spec`.
pub fn generate_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let graph = synth_graph(spec.samples)?;
    let cfg = CueConfig::default();
    let template = PromptTemplate::kg_v1();
    let (lo, hi) = spec.sas_range;
    let mut samples = Vec::with_capacity(spec.samples);
    let mut prepared = Vec::with_capacity(spec.samples);
    let mut bundles = Vec::with_capacity(spec.samples);
    let mut truth = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let sample = synth_sample(i);
        let prep = prepare_graph_sample(&graph, &sample, &cfg, &template)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth", i as u64));
        let p: f64 = rng.gen();
        let sas = lo + (hi - lo) * rng.gen::<f64>();
        let ssr = 2.0 * p - 1.0;
        let prob = spec.rule.probability(ssr, sas);
        let hallucinated = rng.gen::<f64>() < prob;
        let [_, _, a, .., w] = names(i);
        let answer = if hallucinated { format!("town {w}") } else { format!("city {a}") };
        let token_sas = token_targets(sas, spec.token_spread, spec.answer_tokens);
        let planted = PlantedSpec {
            core_mass: p,
            token_sas: token_sas.clone(),
            layers: spec.layers,
            heads: spec.heads,
            source_len: spec.source_len,
            hidden_dim: spec.hidden_dim,
            seed: derive_seed(spec.seed, "planted", i as u64),
            generated_text: format!("ans: {answer}"),
        };
        bundles.push(generate_planted(&planted, &prep.layout, &prep.cues)?);
        truth.push(SynthTruth {
            sample_id: sample.sample_id.clone(),
            core_mass: p,
            ssr,
            sas,
            token_sas,
            hallucination_probability: prob,
            hallucinated,
        });
        samples.push(sample);
        prepared.push(prep);
    }
    Ok(SynthCorpus { spec: spec.clone(), graph, samples, prepared, bundles, truth })
}

/// AUC of the Bayes-optimal score (the rule's own probability) when
/// `ssr ~ U(-1, 1)` and `sas ~ U(sas_range)`, by midpoint quadrature on a
/// `grid x grid` lattice. Rules that are piecewise constant on cells
/// aligned with the lattice are integrated exactly.
pub fn bayes_auc(rule: &GenerativeRule, sas_range: (f64, f64), grid: usize) -> Result<f64> {
    rule.validate()?;
    let (lo, hi) = sas_range;
    let g = grid.max(1);
    let mut eta: Vec<f64> = Vec::with_capacity(g * g);
    for i in 0..g {
        let ssr = -1.0 + 2.0 * (i as f64 + 0.5) / g as f64;
        for j in 0..g {
            let sas = lo + (hi - lo) * (j as f64 + 0.5) / g as f64;
            eta.push(rule.probability(ssr, sas));
        }
    }
    eta.sort_by(f64::total_cmp);
    let pos_total: f64 = eta.iter().sum();
    let neg_total: f64 = eta.iter().map(|e| 1.0 - e).sum();
    if pos_total <= 0.0 || neg_total <= 0.0 {
        return Err(Error::SingleClass("rule produces a single class".into()));
    }
    let mut neg_below = 0.0;
    let mut acc = 0.0;
    let mut k = 0;
    while k < eta.len() {
        let v = eta[k];
        let mut end = k;
        while end < eta.len() && eta[end] == v {
            end += 1;
        }
        let n = (end - k) as f64;
        let (pos, neg) = (v * n, (1.0 - v) * n);
        acc += pos * (neg_below + 0.5 * neg);
        neg_below += neg;
        k = end;
    }
    Ok(acc / (pos_total * neg_total))
}
