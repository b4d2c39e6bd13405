// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on failure.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use kgdiag::cueminer::{extract_core_cues, score_neighbor, trim_subgraph, CueConfig};
use kgdiag::detector::{ablation, train, Feature, TrainConfig};
use kgdiag::kgstore::Triple;
use kgdiag::labeler::{score_and_label, Label};
use kgdiag::metrics::{build_partition, compute_sas, compute_ssr, Scope};
use kgdiag::pipeline::{analyze_sample, prepare_graph_sample};
use kgdiag::stats::{
    pearson, permutation_robustness, quadrant_analysis, spearman, support_set_variants, two_sample_t,
    PlantedTraceSource, Quadrant, SampleRecord,
};
use kgdiag::synth::{bayes_auc, generate_corpus, synth_graph, synth_sample, GenerativeRule, SynthCorpus, SynthSpec};
use kgdiag::tracefmt::{generate_planted, read_bundle, write_bundle, PlantedSpec, TraceBundle};
use kgdiag::{CueSets, PromptTemplate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn planted_fixture() -> (kgdiag::pipeline::Prepared, usize) {
    let graph = synth_graph(1).unwrap();
    let sample = synth_sample(0);
    let prep = prepare_graph_sample(&graph, &sample, &CueConfig::default(), &PromptTemplate::kg_v1()).unwrap();
    let units = prep.cues.support.len();
    (prep, units)
}

fn ssr_planted() -> Outcome {
    let started = Instant::now();
    let (prep, units) = planted_fixture();
    let mut worst = 0.0f64;
    for p in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let spec = PlantedSpec {
            core_mass: p,
            token_sas: vec![0.5; 3],
            layers: 4,
            heads: 4,
            source_len: 64,
            hidden_dim: units + 8,
            seed: 1,
            generated_text: String::new(),
        };
        let b = generate_planted(&spec, &prep.layout, &prep.cues).map_err(|e| e.to_string())?;
        let part = build_partition(&prep.layout, &prep.cues.core, &b.token_offsets, Scope::FullSequence)
            .map_err(|e| e.to_string())?;
        let ssr = compute_ssr(&b, &part).map_err(|e| e.to_string())?.ssr;
        worst = worst.max((ssr - (2.0 * p - 1.0)).abs());
    }
    let elapsed = started.elapsed();
    ensure!(worst <= 1e-9, "max |ssr - (2p-1)| = {worst:e}");
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("max error {worst:e}, {elapsed:?}"))
}

fn sas_planted() -> Outcome {
    let (prep, units) = planted_fixture();
    let targets = vec![1.0, 0.5, 0.0, -0.5];
    let spec = PlantedSpec {
        core_mass: 0.5,
        token_sas: targets.clone(),
        layers: 1,
        heads: 1,
        source_len: 16,
        hidden_dim: units + 8,
        seed: 2,
        generated_text: String::new(),
    };
    let b = generate_planted(&spec, &prep.layout, &prep.cues).map_err(|e| e.to_string())?;
    let r = compute_sas(&b, &prep.cues.support).map_err(|e| e.to_string())?;
    ensure!(r.token_sas.len() == 4, "{} tokens scored", r.token_sas.len());
    let worst = r.token_sas.iter().zip(&targets).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(worst <= 1e-9, "token error {worst:e}: {:?}", r.token_sas);
    let mean = targets.iter().sum::<f64>() / 4.0;
    ensure!((r.sas - mean).abs() <= 1e-9, "sentence SAS {} vs {mean}", r.sas);
    Ok(format!("max token error {worst:e}"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut ssr_err, mut sas_err) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let case = common::random_case(&mut rng);
        for scope in [Scope::FullSequence, Scope::KnowledgeRegion] {
            let part = build_partition(&case.layout, &case.cues.core, &case.bundle.token_offsets, scope)
                .map_err(|e| e.to_string())?;
            let fast = match compute_ssr(&case.bundle, &part) {
                Ok(r) => r.ssr,
                Err(kgdiag::Error::ZeroRegionMass { .. }) => continue,
                Err(e) => return Err(e.to_string()),
            };
            ssr_err = ssr_err.max((fast - common::naive_ssr(&case, scope)).abs());
        }
        let fast = compute_sas(&case.bundle, &case.cues.support).map_err(|e| e.to_string())?.sas;
        sas_err = sas_err.max((fast - common::naive_sas(&case.bundle, &case.cues.support)).abs());
    }
    ensure!(ssr_err <= 1e-12, "SSR deviates by {ssr_err:e}");
    ensure!(sas_err <= 1e-9, "SAS deviates by {sas_err:e}");
    Ok(format!("SSR max dev {ssr_err:e}, SAS max dev {sas_err:e}"))
}

fn cue_mining() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let cfg = CueConfig::default();
    let mut nonempty = 0;
    for g in 0..500 {
        let graph = common::random_graph(&mut rng, 12, 40);
        let sample = common::random_sample(&mut rng, &graph);
        let fast = extract_core_cues(&graph, &sample, &cfg).map_err(|e| e.to_string())?;
        let slow = common::brute_force_core(&graph, &sample, cfg.max_hops);
        ensure!(fast == slow, "graph {g}: core {fast:?} vs brute force {slow:?}");
        if fast.is_empty() {
            continue;
        }
        nonempty += 1;
        let k = rng.gen_range(fast.len()..fast.len() + 10);
        let small = CueConfig { k_subgraph: k, ..cfg.clone() };
        let trimmed = trim_subgraph(&graph, &fast, &sample, &small).map_err(|e| e.to_string())?;
        let oracle = common::full_sort_trim(&graph, &fast, &sample, k);
        ensure!(trimmed == oracle, "graph {g}: trim {trimmed:?} vs full sort {oracle:?}");
    }
    let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<std::collections::HashSet<String>>();
    let cases = [
        (Triple::new("x", "r", "y"), 0),
        (Triple::new("q", "r", "y"), 2),
        (Triple::new("p", "r", "y"), 3),
        (Triple::new("q", "r", "a"), 4),
        (Triple::new("p", "r", "q"), 5),
        (Triple::new("pq", "r", "a"), 7),
    ];
    let (path, qs, ans) = (set(&["p", "pq"]), set(&["q", "pq"]), set(&["a"]));
    let scores: Vec<u32> = cases.iter().map(|(t, _)| score_neighbor(t, &path, &qs, &ans)).collect();
    let want: Vec<u32> = cases.iter().map(|(_, s)| *s).collect();
    ensure!(scores == want, "score table {scores:?} vs {want:?}");
    Ok(format!("500 graphs ({nonempty} with a path), score table {scores:?}"))
}

fn labeling() -> Outcome {
    let t = 0.3;
    let r = score_and_label("Keanu Reeves Laurence", &["Keanu Reeves"], t);
    ensure!((r.f1 - 0.8).abs() <= 1e-12, "f1 = {}", r.f1);
    ensure!(r.label == Label::Truthful, "0.8 F1 labeled {:?}", r.label);
    let r = score_and_label("Matrix", &["The Matrix"], t);
    ensure!(r.em && r.label == Label::Truthful, "article-stripped EM failed: {r:?}");
    let r = score_and_label("", &["x"], t);
    ensure!(!r.em && r.f1 == 0.0 && r.label == Label::Hallucinated, "empty prediction: {r:?}");
    let r = score_and_label("The Matrix!", &["matrix"], t);
    ensure!(r.em, "punctuation EM failed");

    let words = ["the", "a", "matrix", "keanu", "reeves", "nolan", "film", "x", "y", "z"];
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let phrase = |rng: &mut ChaCha8Rng| -> String {
        (0..rng.gen_range(0..5)).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
    };
    for i in 0..1000 {
        let (p, g) = (phrase(&mut rng), phrase(&mut rng));
        let hi: f64 = rng.gen();
        let lo = hi * rng.gen::<f64>();
        let (a, b) = (score_and_label(&p, &[&g], hi), score_and_label(&p, &[&g], lo));
        ensure!(
            !(a.label == Label::Truthful && b.label == Label::Hallucinated),
            "pair {i}: lowering the threshold from {hi} to {lo} flipped {p:?}/{g:?}"
        );
    }
    Ok("case table and 1000 monotonicity pairs".into())
}

fn statistics() -> Outcome {
    let t = two_sample_t(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).map_err(|e| e.to_string())?;
    ensure!((t.t + 3.674).abs() <= 1e-3, "t = {}", t.t);
    ensure!(t.df == 4.0, "df = {}", t.df);
    ensure!((t.p - 0.0213).abs() <= 1e-3, "p = {}", t.p);

    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(3..60);
        let x: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 4.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v * rng.gen::<f64>() + rng.gen_range(0..5) as f64).collect();
        let (Ok(r), Ok(rho)) = (pearson(&x, &y), spearman(&x, &y)) else { continue };
        worst = worst.max((r - common::brute_pearson(&x, &y)).abs());
        let (rx, ry) = (common::brute_ranks(&x), common::brute_ranks(&y));
        worst = worst.max((rho - common::brute_pearson(&rx, &ry)).abs());
    }
    ensure!(worst <= 1e-10, "correlation deviates by {worst:e}");

    for d in 0..200 {
        let n = rng.gen_range(4..300);
        let records: Vec<SampleRecord> = (0..n)
            .map(|i| SampleRecord {
                sample_id: i.to_string(),
                ssr: rng.gen_range(0..8) as f64 / 8.0,
                sas: rng.gen_range(0..8) as f64 / 8.0,
                label: if rng.gen_bool(0.4) { Label::Hallucinated } else { Label::Truthful },
                baseline_scores: BTreeMap::new(),
                quadrant: None,
                dataset_tag: String::new(),
            })
            .collect();
        let (report, assigned) = quadrant_analysis(&records).map_err(|e| e.to_string())?;
        let total: usize = report.quadrants.iter().map(|q| q.count).sum();
        ensure!(total == n, "dataset {d}: counts sum to {total}, N = {n}");
        for (r, q) in records.iter().zip(&assigned) {
            let want = match (r.ssr > report.ssr_median, r.sas > report.sas_median) {
                (true, true) => Quadrant::Q1,
                (false, true) => Quadrant::Q2,
                (false, false) => Quadrant::Q3,
                (true, false) => Quadrant::Q4,
            };
            ensure!(*q == want, "dataset {d}: record {} in {q:?}, expected {want:?}", r.sample_id);
        }
    }
    Ok(format!("t = {:.4}, p = {:.4}; correlation max dev {worst:e}; 200 quadrant datasets", t.t, t.p))
}

fn corpus_records(corpus: &SynthCorpus) -> Result<Vec<SampleRecord>, String> {
    corpus
        .bundles
        .iter()
        .zip(&corpus.prepared)
        .zip(&corpus.samples)
        .map(|((b, p), s)| {
            analyze_sample(b, p, s, Scope::FullSequence, 0.3, "synthetic").map(|a| a.record).map_err(|e| e.to_string())
        })
        .collect()
}

fn synthetic_detection() -> Outcome {
    let started = Instant::now();
    let monotone = SynthSpec { samples: 5000, seed: 7, ..SynthSpec::default() };
    let corpus = generate_corpus(&monotone).map_err(|e| e.to_string())?;
    let records = corpus_records(&corpus)?;
    let agree = records.iter().zip(&corpus.truth).filter(|(r, t)| r.label.is_hallucinated() == t.hallucinated).count();
    ensure!(agree == records.len(), "labels recovered for {agree}/{} samples", records.len());
    let bayes = bayes_auc(&monotone.rule, monotone.sas_range, 1024).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { seed: 7, ..TrainConfig::default() };
    let trained = train(&records, &[Feature::Ssr, Feature::Sas], &cfg).map_err(|e| e.to_string())?;
    let auc = trained.validation.auc;
    ensure!((auc - bayes).abs() <= 0.03, "detector AUC {auc:.4} vs Bayes {bayes:.4}");

    let xor = SynthSpec {
        samples: 5000,
        seed: 8,
        rule: GenerativeRule::Xor { ssr_cut: 0.0, sas_cut: 0.5, high: 0.9, low: 0.1 },
        ..SynthSpec::default()
    };
    let xor_records = corpus_records(&generate_corpus(&xor).map_err(|e| e.to_string())?)?;
    let ab = ablation(&xor_records, &TrainConfig { seed: 8, ..TrainConfig::default() }).map_err(|e| e.to_string())?;
    let (both, ssr, sas) = (ab.auc("ssr+sas").unwrap(), ab.auc("ssr-only").unwrap(), ab.auc("sas-only").unwrap());
    ensure!(both - ssr >= 0.2 && both - sas >= 0.2, "interaction AUCs: both {both:.4}, ssr {ssr:.4}, sas {sas:.4}");
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "AUC {auc:.4} vs Bayes {bayes:.4}; interaction AUCs ssr+sas {both:.4}, ssr {ssr:.4}, sas {sas:.4}; {elapsed:.1?}"
    ))
}

fn robustness() -> Outcome {
    let spec = SynthSpec { samples: 40, seed: 9, ..SynthSpec::default() };
    let corpus = generate_corpus(&spec).map_err(|e| e.to_string())?;
    let mut source = PlantedTraceSource { specs: HashMap::new(), position_noise: 0.0 };
    for (t, b) in corpus.truth.iter().zip(&corpus.bundles) {
        source.specs.insert(
            t.sample_id.clone(),
            PlantedSpec {
                core_mass: t.core_mass,
                token_sas: t.token_sas.clone(),
                layers: spec.layers,
                heads: spec.heads,
                source_len: spec.source_len,
                hidden_dim: spec.hidden_dim,
                seed: 0,
                generated_text: b.generated_text.clone(),
            },
        );
    }
    let samples: Vec<(kgdiag::PromptLayout, CueSets)> =
        corpus.prepared.iter().map(|p| (p.layout.clone(), p.cues.clone())).collect();
    let report =
        permutation_robustness(&source, &samples, &[1, 2, 3, 4, 5], Scope::FullSequence).map_err(|e| e.to_string())?;
    ensure!(report.rho == 1.0, "rho = {}", report.rho);

    // variant AUCs are wins / 100 over 10 positives and 10 negatives
    let variant = |wins_per_positive: [usize; 10]| -> Vec<SampleRecord> {
        let rec = |id: String, ssr: f64, label| SampleRecord {
            sample_id: id,
            ssr,
            sas: 0.0,
            label,
            baseline_scores: BTreeMap::new(),
            quadrant: None,
            dataset_tag: String::new(),
        };
        let mut out: Vec<SampleRecord> = (0..10).map(|j| rec(format!("n{j}"), j as f64, Label::Truthful)).collect();
        out.extend(
            wins_per_positive
                .iter()
                .enumerate()
                .map(|(i, &k)| rec(format!("p{i}"), k as f64 - 0.5, Label::Hallucinated)),
        );
        out
    };
    let v = support_set_variants(&[
        ("a".into(), variant([10, 10, 10, 10, 10, 5, 0, 0, 0, 0])),
        ("b".into(), variant([10, 10, 10, 10, 10, 7, 0, 0, 0, 0])),
    ])
    .map_err(|e| e.to_string())?;
    ensure!((v.variants[0].1 - 0.55).abs() < 1e-12 && (v.variants[1].1 - 0.57).abs() < 1e-12, "{:?}", v.variants);
    ensure!((v.mean_auc - 0.56).abs() < 1e-12, "mean {}", v.mean_auc);
    ensure!((v.std_auc - 0.01).abs() < 1e-12, "std {}", v.std_auc);
    Ok(format!(
        "rho = {} over {} permutations; variants mean {:.2} std {:.2}",
        report.rho,
        report.permuted_ssr.len(),
        v.mean_auc,
        v.std_auc
    ))
}

fn bundle_bits(b: &TraceBundle) -> Vec<u32> {
    b.attention
        .iter()
        .chain(&b.answer_hidden)
        .chain(&b.unit_embeddings)
        .map(|v| v.to_bits())
        .chain(b.step_probs.iter().flat_map(|s| {
            let (c, m) = (s.chosen.to_bits(), s.max.to_bits());
            [c as u32, (c >> 32) as u32, m as u32, (m >> 32) as u32]
        }))
        .collect()
}

fn format_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for i in 0..100 {
        let b = common::random_case(&mut rng).bundle;
        let path = dir.path().join(format!("b{i}"));
        write_bundle(&b, &path).map_err(|e| e.to_string())?;
        let back = read_bundle(&path).map_err(|e| e.to_string())?;
        ensure!(back == b && bundle_bits(&back) == bundle_bits(&b), "bundle {i} changed on round trip");
        let again = dir.path().join(format!("c{i}"));
        write_bundle(&back, &again).map_err(|e| e.to_string())?;
        for f in ["manifest.json", "attention.f32", "hidden.f32", "units.f32", "steps.json", "offsets.json"] {
            let (x, y) = (std::fs::read(path.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap());
            ensure!(x == y, "bundle {i}: {f} bytes differ after re-write");
        }
    }

    let base = common::random_case(&mut ChaCha8Rng::seed_from_u64(61)).bundle;
    type Corrupt = Box<dyn Fn(&mut TraceBundle)>;
    let corruptions: Vec<(&str, Corrupt)> = vec![
        ("row sum", Box::new(|b| b.attention[0] += 0.01)),
        (
            "negative weight",
            Box::new(|b| {
                let v = b.attention[0];
                b.attention[0] = -v - 1e-3;
                b.attention[1] += 2.0 * v + 1e-3;
            }),
        ),
        ("nan attention", Box::new(|b| b.attention[0] = f32::NAN)),
        ("nan hidden", Box::new(|b| b.answer_hidden[0] = f32::NAN)),
        ("infinite embedding", Box::new(|b| b.unit_embeddings[0] = f32::INFINITY)),
        (
            "attention length",
            Box::new(|b| {
                b.attention.pop();
            }),
        ),
        (
            "hidden length",
            Box::new(|b| {
                b.answer_hidden.pop();
            }),
        ),
        (
            "embedding length",
            Box::new(|b| {
                b.unit_embeddings.pop();
            }),
        ),
        (
            "offset count",
            Box::new(|b| {
                b.token_offsets.pop();
            }),
        ),
        (
            "step count",
            Box::new(|b| {
                b.step_probs.pop();
            }),
        ),
        ("probability range", Box::new(|b| b.step_probs[0].max = 1.5)),
        (
            "chosen above max",
            Box::new(|b| {
                b.step_probs[0].max = 0.2;
                b.step_probs[0].chosen = 0.9;
            }),
        ),
        ("offset order", Box::new(|b| b.token_offsets.swap(0, 1))),
        (
            "inverted offset",
            Box::new(|b| {
                let (s, e) = b.token_offsets[0];
                b.token_offsets[0] = (e + 1, s);
            }),
        ),
        (
            "duplicate unit",
            Box::new(|b| {
                if b.unit_ids.len() > 1 {
                    b.unit_ids[1] = b.unit_ids[0];
                } else {
                    b.unit_ids.push(b.unit_ids[0]);
                    let row = b.unit_embeddings.clone();
                    b.unit_embeddings.extend(row);
                }
            }),
        ),
        (
            "zero answer length",
            Box::new(|b| {
                b.answer_len = 0;
                b.attention.clear();
                b.answer_hidden.clear();
                b.step_probs.clear();
            }),
        ),
    ];
    let mut rejected = 0;
    for (name, corrupt) in &corruptions {
        let mut b = base.clone();
        corrupt(&mut b);
        ensure!(b.validate().is_err(), "corruption '{name}' accepted");
        rejected += 1;
    }

    // on-disk damage caught by the reader
    let path = dir.path().join("disk");
    write_bundle(&base, &path).map_err(|e| e.to_string())?;
    let att = std::fs::read(path.join("attention.f32")).unwrap();
    std::fs::write(path.join("attention.f32"), &att[..att.len() - 4]).unwrap();
    ensure!(read_bundle(&path).is_err(), "truncated attention file accepted");
    std::fs::write(path.join("attention.f32"), &att).unwrap();
    let manifest = std::fs::read_to_string(path.join("manifest.json")).unwrap();
    std::fs::write(path.join("manifest.json"), manifest.replace("\"format_version\": 1", "\"format_version\": 99"))
        .unwrap();
    ensure!(read_bundle(&path).is_err(), "unknown format version accepted");
    std::fs::remove_file(path.join("steps.json")).unwrap();
    ensure!(read_bundle(&path).is_err(), "missing file accepted");
    rejected += 3;
    Ok(format!("100 bundles bitwise identical; {rejected} corruptions rejected"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("ssr-planted-exactness", ssr_planted),
        ("sas-planted-exactness", sas_planted),
        ("oracle-equivalence", oracle_equivalence),
        ("cue-mining-equivalence", cue_mining),
        ("labeling", labeling),
        ("statistics", statistics),
        ("synthetic-end-to-end-detection", synthetic_detection),
        ("robustness-harness", robustness),
        ("format", format_round_trip),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (mut ran, mut failed) = (0, 0);
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {}/{ran} passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
