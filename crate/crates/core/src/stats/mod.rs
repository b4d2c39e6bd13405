// SPDX-License-Identifier: Apache-2.0

//! Group tests, correlations, quadrant analysis and robustness harnesses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeler::Label;

pub mod robustness;
pub mod special;

pub use robustness::{permutation_robustness, support_set_variants, PlantedTraceSource, TraceSource, VariantReport};

/// One analysed sample; the row type for statistics and detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub ssr: f64,
    pub sas: f64,
    pub label: Label,
    #[serde(default)]
    pub baseline_scores: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrant: Option<Quadrant>,
    #[serde(default)]
    pub dataset_tag: String,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sum of squared deviations from the mean.
fn centered_ss(v: &[f64], m: f64) -> f64 {
    v.iter().map(|x| (x - m) * (x - m)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Zero variance in both groups with different means.
    pub degenerate: bool,
    pub welch: bool,
}

fn check_groups(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Invalid(format!(
            "t-test needs at least 2 values per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn finish(diff: f64, se: f64, df: f64, mean_a: f64, mean_b: f64, welch: bool) -> TTest {
    let (t, p, degenerate) = if se == 0.0 {
        if diff == 0.0 {
            (0.0, 1.0, false)
        } else {
            (diff.signum() * f64::INFINITY, 0.0, true)
        }
    } else {
        let t = diff / se;
        (t, special::student_t_two_sided(t, df), false)
    };
    TTest { t, df, p, mean_a, mean_b, degenerate, welch }
}

/// Pooled-variance Student t-test of `a` against `b` (two-sided).
pub fn two_sample_t(a: &[f64], b: &[f64]) -> Result<TTest> {
    check_groups(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let df = na + nb - 2.0;
    let pooled = (centered_ss(a, ma) + centered_ss(b, mb)) / df;
    let se = (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    Ok(finish(ma - mb, se, df, ma, mb, false))
}

/// Welch's unequal-variance t-test with Welch-Satterthwaite df.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TTest> {
    check_groups(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let va = centered_ss(a, ma) / (na - 1.0) / na;
    let vb = centered_ss(b, mb) / (nb - 1.0) / nb;
    let se = (va + vb).sqrt();
    let df =
        if va + vb == 0.0 { na + nb - 2.0 } else { (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0)) };
    Ok(finish(ma - mb, se, df, ma, mb, true))
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid(format!(
            "correlation needs two equal-length series of at least 2 values ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let (mx, my) = (mean(x), mean(y));
    let (sxx, syy) = (centered_ss(x, mx), centered_ss(y, my));
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("zero variance".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties get the mean of the ranks they span.
pub fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of midranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid("spearman needs two equal-length series of at least 2 values".into()));
    }
    pearson(&midranks(x), &midranks(y)).map_err(|_| Error::Undefined("all values tied".into()))
}

/// Two-sided p-value for a correlation coefficient with `n` pairs.
pub fn correlation_p(r: f64, n: usize) -> f64 {
    if n < 3 {
        return f64::NAN;
    }
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    special::student_t_two_sided(r * (df / (1.0 - r * r)).sqrt(), df)
}

/// Median; even counts take the mean of the central pair.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Five-number summary for box plots (linear-interpolation quartiles).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub group: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn box_stats(group: &str, v: &[f64]) -> Option<BoxStats> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Some(BoxStats {
        group: group.to_string(),
        n: s.len(),
        min: s[0],
        q1: quantile_sorted(&s, 0.25),
        median: median(&s),
        q3: quantile_sorted(&s, 0.75),
        max: s[s.len() - 1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quadrant {
    /// High SSR, high SAS.
    Q1,
    /// Low SSR, high SAS.
    Q2,
    /// Low SSR, low SAS.
    Q3,
    /// High SSR, low SAS.
    Q4,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::Q1, Quadrant::Q2, Quadrant::Q3, Quadrant::Q4];

    /// "High" means strictly above the median.
    pub fn assign(ssr: f64, sas: f64, ssr_median: f64, sas_median: f64) -> Self {
        match (ssr > ssr_median, sas > sas_median) {
            (true, true) => Quadrant::Q1,
            (false, true) => Quadrant::Q2,
            (false, false) => Quadrant::Q3,
            (true, false) => Quadrant::Q4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantStats {
    pub quadrant: Quadrant,
    pub count: usize,
    /// `None` for an empty quadrant.
    pub hallucination_rate: Option<f64>,
    pub mean_ssr: Option<f64>,
    pub mean_sas: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantReport {
    pub ssr_median: f64,
    pub sas_median: f64,
    pub tie_rule: String,
    pub total: usize,
    pub hallucination_rate: f64,
    pub quadrants: Vec<QuadrantStats>,
}

/// Median split of (SSR, SAS) into four regimes. Returns the report and the
/// quadrant of every record, in input order.
pub fn quadrant_analysis(records: &[SampleRecord]) -> Result<(QuadrantReport, Vec<Quadrant>)> {
    if records.len() < 4 {
        return Err(Error::Invalid(format!("quadrant analysis needs at least 4 records, got {}", records.len())));
    }
    let ssr: Vec<f64> = records.iter().map(|r| r.ssr).collect();
    let sas: Vec<f64> = records.iter().map(|r| r.sas).collect();
    let (ms, ma) = (median(&ssr), median(&sas));
    let assigned: Vec<Quadrant> = records.iter().map(|r| Quadrant::assign(r.ssr, r.sas, ms, ma)).collect();

    let quadrants = Quadrant::ALL
        .iter()
        .map(|&q| {
            let members: Vec<&SampleRecord> =
                records.iter().zip(&assigned).filter(|(_, &a)| a == q).map(|(r, _)| r).collect();
            let count = members.len();
            let avg = |f: &dyn Fn(&SampleRecord) -> f64| {
                (count > 0).then(|| members.iter().map(|r| f(r)).sum::<f64>() / count as f64)
            };
            QuadrantStats {
                quadrant: q,
                count,
                hallucination_rate: avg(&|r| r.label.is_hallucinated() as u8 as f64),
                mean_ssr: avg(&|r| r.ssr),
                mean_sas: avg(&|r| r.sas),
            }
        })
        .collect();
    let halluc = records.iter().filter(|r| r.label.is_hallucinated()).count();
    Ok((
        QuadrantReport {
            ssr_median: ms,
            sas_median: ma,
            tie_rule: "values equal to the median count as low".into(),
            total: records.len(),
            hallucination_rate: halluc as f64 / records.len() as f64,
            quadrants,
        },
        assigned,
    ))
}

/// ROC AUC of `scores` for the positive class via the Mann-Whitney U
/// statistic with midranks.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Invalid("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("non-finite score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass("AUC undefined for a single class".into()));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Correlations of SSR and SAS with each other and with the label
/// (truthful coded as 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n: usize,
    pub label_coding: String,
    pub ssr_sas: CorrelationEntry,
    pub ssr_label: CorrelationEntry,
    pub sas_label: CorrelationEntry,
    pub ssr_sas_spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub r: Option<f64>,
    pub p: Option<f64>,
}

fn entry(x: &[f64], y: &[f64]) -> CorrelationEntry {
    match pearson(x, y) {
        Ok(r) => CorrelationEntry { r: Some(r), p: Some(correlation_p(r, x.len())) },
        Err(_) => CorrelationEntry { r: None, p: None },
    }
}

pub fn correlation_report(records: &[SampleRecord]) -> CorrelationReport {
    let ssr: Vec<f64> = records.iter().map(|r| r.ssr).collect();
    let sas: Vec<f64> = records.iter().map(|r| r.sas).collect();
    let truthful: Vec<f64> = records.iter().map(|r| (!r.label.is_hallucinated()) as u8 as f64).collect();
    CorrelationReport {
        n: records.len(),
        label_coding: "truthful=1, hallucinated=0".into(),
        ssr_sas: entry(&ssr, &sas),
        ssr_label: entry(&ssr, &truthful),
        sas_label: entry(&sas, &truthful),
        ssr_sas_spearman: spearman(&ssr, &sas).ok(),
    }
}

/// Hallucinated-vs-truthful t-tests for SSR and SAS (group A = hallucinated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTests {
    pub n_hallucinated: usize,
    pub n_truthful: usize,
    pub ssr: Option<TTest>,
    pub sas: Option<TTest>,
}

pub fn group_tests(records: &[SampleRecord], welch: bool) -> GroupTests {
    let split = |f: fn(&SampleRecord) -> f64| {
        let h: Vec<f64> = records.iter().filter(|r| r.label.is_hallucinated()).map(f).collect();
        let t: Vec<f64> = records.iter().filter(|r| !r.label.is_hallucinated()).map(f).collect();
        (h, t)
    };
    let test = |a: &[f64], b: &[f64]| if welch { welch_t(a, b) } else { two_sample_t(a, b) }.ok();
    let (hs, ts) = split(|r| r.ssr);
    let (ha, ta) = split(|r| r.sas);
    GroupTests { n_hallucinated: hs.len(), n_truthful: ts.len(), ssr: test(&hs, &ts), sas: test(&ha, &ta) }
}
