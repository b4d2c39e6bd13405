// SPDX-License-Identifier: Apache-2.0

//! Hallucination detectors over (SSR, SAS) features, plus baseline scoring
//! and evaluation.
//!
//! The positive class (class 1) is *hallucinated* throughout.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{roc_auc, SampleRecord};

pub mod baselines;
pub mod gbdt;

pub use baselines::{baseline_scores, orientation};
pub use gbdt::{BoostParams, Node, Tree};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const FALLBACK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Ssr,
    Sas,
}

impl Feature {
    pub fn of(self, r: &SampleRecord) -> f64 {
        match self {
            Feature::Ssr => r.ssr,
            Feature::Sas => r.sas,
        }
    }
}

/// Named feature subsets used by the ablation.
pub const FEATURE_SETS: [(&str, &[Feature]); 3] =
    [("ssr-only", &[Feature::Ssr]), ("sas-only", &[Feature::Sas]), ("ssr+sas", &[Feature::Ssr, Feature::Sas])];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[default]
    Gbdt,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub boost: BoostParams,
    pub train_fraction: f64,
    pub seed: u64,
    /// Ridge penalty for the logistic model (standardized features).
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { kind: ModelKind::Gbdt, boost: BoostParams::default(), train_fraction: 0.8, seed: 0, l2: 1e-6 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Invalid(format!("train_fraction {} not in (0, 1)", self.train_fraction)));
        }
        let b = &self.boost;
        if b.rounds == 0 || b.max_depth == 0 || b.learning_rate <= 0.0 || b.lambda < 0.0 || b.min_child_weight < 0.0 {
            return Err(Error::Invalid("boosting parameters out of range".into()));
        }
        if self.l2 < 0.0 {
            return Err(Error::Invalid("l2 must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelBody {
    Gbdt { base_margin: f64, trees: Vec<Tree> },
    Logistic { bias: f64, weights: Vec<f64>, means: Vec<f64>, scales: Vec<f64> },
}

/// A trained detector. Serializes to a self-describing JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub format_version: u32,
    pub features: Vec<Feature>,
    pub threshold: f64,
    pub config: TrainConfig,
    pub body: ModelBody,
}

impl DetectorModel {
    pub fn features_of(&self, r: &SampleRecord) -> Vec<f64> {
        self.features.iter().map(|f| f.of(r)).collect()
    }

    pub fn margin(&self, x: &[f64]) -> f64 {
        match &self.body {
            ModelBody::Gbdt { base_margin, trees } => base_margin + trees.iter().map(|t| t.predict(x)).sum::<f64>(),
            ModelBody::Logistic { bias, weights, means, scales } => {
                bias + x
                    .iter()
                    .zip(weights)
                    .zip(means.iter().zip(scales))
                    .map(|((v, w), (m, s))| w * (v - m) / s)
                    .sum::<f64>()
            }
        }
    }

    /// Probability of the hallucinated class.
    pub fn predict_proba(&self, r: &SampleRecord) -> f64 {
        gbdt::sigmoid(self.margin(&self.features_of(r)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DetectorModel = serde_json::from_str(text)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Unsupported(format!("model format version {}", m.format_version)));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub auc: f64,
    pub threshold: f64,
    pub precision_class1: f64,
    pub recall_class1: f64,
    pub f1_class1: f64,
    pub f1_macro: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
}

impl EvalReport {
    /// Derive the threshold-dependent metrics from a confusion matrix.
    /// Undefined ratios (empty denominators) are reported as 0.
    pub fn from_confusion(auc: f64, threshold: f64, c: Confusion) -> Self {
        let f1_pos = f1(c.tp, c.fp, c.fn_);
        let f1_neg = f1(c.tn, c.fn_, c.fp);
        EvalReport {
            n: c.total(),
            auc,
            threshold,
            precision_class1: ratio(c.tp, c.tp + c.fp),
            recall_class1: ratio(c.tp, c.tp + c.fn_),
            f1_class1: f1_pos,
            f1_macro: (f1_pos + f1_neg) / 2.0,
            accuracy: ratio(c.tp + c.tn, c.total()),
            confusion: c,
        }
    }
}

/// Evaluate scores (higher = more likely hallucinated) against labels,
/// calling a sample positive when its score is at least `threshold`.
pub fn evaluate_scores(scores: &[f64], hallucinated: &[bool], threshold: f64) -> Result<EvalReport> {
    let auc = roc_auc(scores, hallucinated)?;
    let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    Ok(EvalReport::from_confusion(auc, threshold, Confusion::from_predictions(&pred, hallucinated)))
}

fn macro_f1_at(scores: &[f64], truth: &[bool], thr: f64) -> f64 {
    let pred: Vec<bool> = scores.iter().map(|&s| s >= thr).collect();
    let c = Confusion::from_predictions(&pred, truth);
    (f1(c.tp, c.fp, c.fn_) + f1(c.tn, c.fn_, c.fp)) / 2.0
}

/// Threshold maximizing macro-F1 over the observed scores. Ties keep the
/// candidate closest to the fallback. A single-class set yields the fallback.
pub fn best_threshold(scores: &[f64], truth: &[bool], fallback: f64) -> f64 {
    if truth.iter().all(|&t| t) || truth.iter().all(|&t| !t) {
        return fallback;
    }
    let mut cands: Vec<f64> = scores.to_vec();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best = (f64::NEG_INFINITY, fallback);
    for &c in &cands {
        let f = macro_f1_at(scores, truth, c);
        let closer = (c - fallback).abs() < (best.1 - fallback).abs();
        if f > best.0 + 1e-12 || ((f - best.0).abs() <= 1e-12 && closer) {
            best = (f, c);
        }
    }
    best.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Seeded shuffle followed by a `train_fraction` cut.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64) * train_fraction).round() as usize;
    let cut = cut.clamp(1.min(n), n.saturating_sub(1).max(1.min(n)));
    let validation = idx.split_off(cut);
    Split { train: idx, validation }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Training {
    pub model: DetectorModel,
    pub split: Split,
    /// Held-out metrics at the selected threshold.
    pub validation: EvalReport,
}

fn fit_logistic(x: &[Vec<f64>], y: &[bool], l2: f64) -> ModelBody {
    let n = x.len() as f64;
    let k = x[0].len();
    let means: Vec<f64> = (0..k).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scales: Vec<f64> = (0..k)
        .map(|j| {
            let s = (x.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> =
        x.iter().map(|r| std::iter::once(1.0).chain((0..k).map(|j| (r[j] - means[j]) / scales[j])).collect()).collect();
    let p = k + 1;
    let mut w = vec![0.0; p];
    for _ in 0..100 {
        let mut grad = vec![0.0; p];
        let mut hess = vec![vec![0.0; p]; p];
        for (zi, &yi) in z.iter().zip(y) {
            let mu = gbdt::sigmoid(zi.iter().zip(&w).map(|(a, b)| a * b).sum());
            let r = mu - yi as u8 as f64;
            let s = (mu * (1.0 - mu)).max(1e-12);
            for a in 0..p {
                grad[a] += r * zi[a];
                for b in 0..p {
                    hess[a][b] += s * zi[a] * zi[b];
                }
            }
        }
        for a in 1..p {
            grad[a] += l2 * w[a];
            hess[a][a] += l2;
        }
        let Some(step) = solve(hess, grad) else { break };
        let mut norm = 0.0f64;
        for (wa, sa) in w.iter_mut().zip(&step) {
            *wa -= sa;
            norm = norm.max(sa.abs());
        }
        if norm < 1e-10 {
            break;
        }
    }
    ModelBody::Logistic { bias: w[0], weights: w[1..].to_vec(), means, scales }
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let (upper, lower) = a.split_at_mut(row);
            for (dst, src) in lower[0][col..n].iter_mut().zip(&upper[col][col..n]) {
                *dst -= f * src;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}

/// Fit a detector on `features`, choosing the decision threshold on the
/// held-out split.
pub fn train(records: &[SampleRecord], features: &[Feature], cfg: &TrainConfig) -> Result<Training> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::Invalid("no features selected".into()));
    }
    if records.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 records, got {}", records.len())));
    }
    let split = split_indices(records.len(), cfg.train_fraction, cfg.seed);
    let row = |r: &SampleRecord| features.iter().map(|f| f.of(r)).collect::<Vec<f64>>();
    let x: Vec<Vec<f64>> = split.train.iter().map(|&i| row(&records[i])).collect();
    let y: Vec<bool> = split.train.iter().map(|&i| records[i].label.is_hallucinated()).collect();
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(Error::SingleClass(format!("training split of {} records has one class", y.len())));
    }
    let body = match cfg.kind {
        ModelKind::Gbdt => {
            let (base_margin, trees) = gbdt::fit(&x, &y, &cfg.boost);
            ModelBody::Gbdt { base_margin, trees }
        }
        ModelKind::Logistic => fit_logistic(&x, &y, cfg.l2),
    };
    let mut model = DetectorModel {
        format_version: MODEL_FORMAT_VERSION,
        features: features.to_vec(),
        threshold: FALLBACK_THRESHOLD,
        config: cfg.clone(),
        body,
    };
    let val: Vec<&SampleRecord> = split.validation.iter().map(|&i| &records[i]).collect();
    let scores: Vec<f64> = val.iter().map(|r| model.predict_proba(r)).collect();
    let truth: Vec<bool> = val.iter().map(|r| r.label.is_hallucinated()).collect();
    model.threshold = best_threshold(&scores, &truth, FALLBACK_THRESHOLD);
    let validation = evaluate_scores(&scores, &truth, model.threshold)?;
    Ok(Training { model, split, validation })
}

/// Apply a trained model to `records` at its stored threshold.
pub fn evaluate(model: &DetectorModel, records: &[SampleRecord]) -> Result<EvalReport> {
    let scores: Vec<f64> = records.iter().map(|r| model.predict_proba(r)).collect();
    let truth: Vec<bool> = records.iter().map(|r| r.label.is_hallucinated()).collect();
    evaluate_scores(&scores, &truth, model.threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub results: BTreeMap<String, EvalReport>,
}

impl AblationReport {
    pub fn auc(&self, name: &str) -> Option<f64> {
        self.results.get(name).map(|r| r.auc)
    }
}

/// Train and validate one detector per feature subset on a shared split.
pub fn ablation(records: &[SampleRecord], cfg: &TrainConfig) -> Result<AblationReport> {
    let mut results = BTreeMap::new();
    for (name, feats) in FEATURE_SETS {
        results.insert(name.to_string(), train(records, feats, cfg)?.validation);
    }
    Ok(AblationReport { seed: cfg.seed, results })
}

/// Evaluate every baseline score present on all `records`, oriented so that
/// higher means hallucinated, with a macro-F1 threshold chosen on the
/// same records.
pub fn evaluate_baselines(records: &[SampleRecord]) -> Result<BTreeMap<String, EvalReport>> {
    let Some(first) = records.first() else {
        return Ok(BTreeMap::new());
    };
    let truth: Vec<bool> = records.iter().map(|r| r.label.is_hallucinated()).collect();
    let mut out = BTreeMap::new();
    for name in first.baseline_scores.keys() {
        let Some(raw) = records.iter().map(|r| r.baseline_scores.get(name).copied()).collect::<Option<Vec<f64>>>()
        else {
            continue;
        };
        let sign = orientation(name);
        let scores: Vec<f64> = raw.iter().map(|v| sign * v).collect();
        let thr = best_threshold(&scores, &truth, scores.iter().sum::<f64>() / scores.len() as f64);
        out.insert(name.clone(), evaluate_scores(&scores, &truth, thr)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeler::Label;

    fn rec(i: usize, ssr: f64, sas: f64, halluc: bool) -> SampleRecord {
        SampleRecord {
            sample_id: format!("s{i}"),
            ssr,
            sas,
            label: if halluc { Label::Hallucinated } else { Label::Truthful },
            baseline_scores: BTreeMap::new(),
            quadrant: None,
            dataset_tag: String::new(),
        }
    }

    fn separable(n: usize) -> Vec<SampleRecord> {
        (0..n)
            .map(|i| {
                let v = i as f64 / n as f64;
                rec(i, v, 0.5, v < 0.5)
            })
            .collect()
    }

    #[test]
    fn confusion_metrics() {
        let c = Confusion { tp: 3, fp: 1, tn: 4, fn_: 2 };
        let r = EvalReport::from_confusion(0.7, 0.5, c);
        assert!((r.precision_class1 - 0.75).abs() < 1e-12);
        assert!((r.recall_class1 - 0.6).abs() < 1e-12);
        assert!((r.f1_class1 - 6.0 / 9.0).abs() < 1e-12);
        assert!((r.f1_macro - (6.0 / 9.0 + 8.0 / 11.0) / 2.0).abs() < 1e-12);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"fn\":2"));
    }

    #[test]
    fn gbdt_learns_separable_split() {
        let recs = separable(200);
        let t = train(&recs, &[Feature::Ssr], &TrainConfig::default()).unwrap();
        assert!(t.validation.auc > 0.99);
        assert!(t.validation.f1_macro > 0.95);
        let again = train(&recs, &[Feature::Ssr], &TrainConfig::default()).unwrap();
        assert_eq!(t.model, again.model);
    }

    #[test]
    fn logistic_learns_separable_split() {
        let recs = separable(200);
        let cfg = TrainConfig { kind: ModelKind::Logistic, l2: 1.0, ..TrainConfig::default() };
        let t = train(&recs, &[Feature::Ssr, Feature::Sas], &cfg).unwrap();
        assert!(t.validation.auc > 0.99);
    }

    #[test]
    fn model_json_round_trip() {
        let recs = separable(50);
        let m = train(&recs, &[Feature::Ssr], &TrainConfig::default()).unwrap().model;
        let back = DetectorModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        for r in &recs {
            assert_eq!(m.predict_proba(r).to_bits(), back.predict_proba(r).to_bits());
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let recs: Vec<_> = (0..20).map(|i| rec(i, i as f64, 0.0, true)).collect();
        assert!(matches!(train(&recs, &[Feature::Ssr], &TrainConfig::default()), Err(Error::SingleClass(_))));
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let s = split_indices(101, 0.8, 3);
        assert_eq!(s.train.len(), 81);
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
    }

    #[test]
    fn threshold_falls_back_on_one_class() {
        assert_eq!(best_threshold(&[0.1, 0.9], &[true, true], 0.5), 0.5);
        assert_eq!(best_threshold(&[0.1, 0.9], &[false, true], 0.5), 0.9);
    }
}
