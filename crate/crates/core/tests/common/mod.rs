// SPDX-License-Identifier: Apache-2.0

//! Random instance generators and brute-force reference implementations
//! shared by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use kgdiag::cueminer::CueSets;
use kgdiag::kgstore::{Graph, QASample, Triple, UnitId};
use kgdiag::linearizer::{linearize, PromptLayout, PromptTemplate};
use kgdiag::metrics::Scope;
use kgdiag::tracefmt::{StepProb, TraceBundle, TraceMetadata};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn random_graph<R: Rng>(rng: &mut R, max_nodes: usize, max_triples: usize) -> Graph {
    let nodes = rng.gen_range(2..=max_nodes);
    let count = rng.gen_range(1..=max_triples);
    let triples: Vec<Triple> = (0..count)
        .map(|_| {
            Triple::new(
                format!("e{}", rng.gen_range(0..nodes)),
                format!("r{}", rng.gen_range(0..4)),
                format!("e{}", rng.gen_range(0..nodes)),
            )
        })
        .collect();
    Graph::from_parts(triples, Vec::new(), Vec::new()).expect("random graph")
}

pub fn random_sample<R: Rng>(rng: &mut R, graph: &Graph) -> QASample {
    let ents: Vec<String> = graph.entity_labels().keys().cloned().collect();
    let pick = |rng: &mut R, k: usize| -> BTreeSet<String> { ents.choose_multiple(rng, k).cloned().collect() };
    let kq = rng.gen_range(1..=2.min(ents.len()));
    let q = pick(rng, kq);
    let ka = rng.gen_range(1..=2.min(ents.len()));
    let a = pick(rng, ka);
    QASample {
        sample_id: "r".into(),
        question: "q?".into(),
        question_entities: q,
        gold_answers: a.clone(),
        gold_answer_entities: a,
        table_id: None,
    }
}

/// Shortest-path triples by exhaustive walk enumeration.
pub fn brute_force_core(graph: &Graph, sample: &QASample, max_hops: usize) -> BTreeSet<UnitId> {
    let ts = graph.triples();
    let mut core = BTreeSet::new();
    for q in &sample.question_entities {
        for a in &sample.gold_answer_entities {
            if q == a {
                continue;
            }
            let mut walks: Vec<Vec<usize>> = Vec::new();
            let mut stack: Vec<(String, Vec<usize>)> = vec![(q.clone(), Vec::new())];
            while let Some((at, path)) = stack.pop() {
                if at == *a && !path.is_empty() {
                    walks.push(path.clone());
                }
                if path.len() == max_hops {
                    continue;
                }
                for (i, t) in ts.iter().enumerate() {
                    for (from, to) in [(&t.head, &t.tail), (&t.tail, &t.head)] {
                        if *from == at {
                            let mut p = path.clone();
                            p.push(i);
                            stack.push((to.clone(), p));
                        }
                    }
                }
            }
            if let Some(d) = walks.iter().map(Vec::len).min() {
                for w in walks.iter().filter(|w| w.len() == d) {
                    core.extend(w.iter().map(|&i| UnitId(i as u32)));
                }
            }
        }
    }
    core
}

/// Neighbour ranking by scoring every triple and fully sorting.
pub fn full_sort_trim(graph: &Graph, core: &BTreeSet<UnitId>, sample: &QASample, k: usize) -> Vec<UnitId> {
    let ts = graph.triples();
    let path: BTreeSet<&str> = core
        .iter()
        .flat_map(|u| {
            let t = &ts[u.0 as usize];
            [t.head.as_str(), t.tail.as_str()]
        })
        .collect();
    let touches = |t: &Triple, s: &dyn Fn(&str) -> bool| s(&t.head) || s(&t.tail);
    let mut scored: Vec<(i64, u32)> = ts
        .iter()
        .enumerate()
        .filter(|(i, t)| !core.contains(&UnitId(*i as u32)) && touches(t, &|e| path.contains(e)))
        .map(|(i, t)| {
            let s = 3 * touches(t, &|e| path.contains(e)) as i64
                + 2 * touches(t, &|e| sample.question_entities.contains(e)) as i64
                + 2 * touches(t, &|e| sample.gold_answer_entities.contains(e)) as i64;
            (-s, i as u32)
        })
        .collect();
    scored.sort();
    let mut out: BTreeSet<UnitId> = core.clone();
    out.extend(scored.iter().take(k.saturating_sub(core.len())).map(|&(_, i)| UnitId(i)));
    out.into_iter().collect()
}

/// A random prompt with random tokenization, attention and embeddings.
pub struct RandomCase {
    pub bundle: TraceBundle,
    pub layout: PromptLayout,
    pub cues: CueSets,
}

pub fn random_case<R: Rng>(rng: &mut R) -> RandomCase {
    let units = rng.gen_range(2..=8);
    let triples: Vec<Triple> = (0..units)
        .map(|i| Triple::new(format!("ent{i}"), format!("rel{}", rng.gen_range(0..3)), format!("obj{i}")))
        .collect();
    let graph = Graph::from_parts(triples, Vec::new(), Vec::new()).unwrap();
    let ids: Vec<UnitId> = graph.unit_ids().collect();
    let sample = QASample {
        sample_id: "case".into(),
        question: "Which one?".into(),
        question_entities: ["ent0".to_string()].into(),
        gold_answers: ["obj0".to_string()].into(),
        gold_answer_entities: ["obj0".to_string()].into(),
        table_id: None,
    };
    let mut order = ids.clone();
    order.shuffle(rng);
    let layout = linearize(&order, &graph, &sample, &PromptTemplate::kg_v1()).unwrap();

    let ncore = rng.gen_range(1..units);
    let core: Vec<UnitId> = order[..ncore].iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let nsup = rng.gen_range(ncore..=units);
    let support: Vec<UnitId> = order[..nsup].to_vec();
    let cues = CueSets { sample_id: "case".into(), core, support: support.clone(), trimmed: ids };

    let chars = layout.char_len();
    let n = rng.gen_range(8..=64.min(chars));
    let mut cuts: BTreeSet<usize> = BTreeSet::new();
    while cuts.len() < n - 1 {
        cuts.insert(rng.gen_range(1..chars));
    }
    let bounds: Vec<usize> = std::iter::once(0).chain(cuts).chain(std::iter::once(chars)).collect();
    let mut token_offsets: Vec<(usize, usize)> = bounds.windows(2).map(|w| (w[0], w[1])).collect();
    // an occasional zero-width token, as produced by special tokens
    if rng.gen_bool(0.3) {
        let j = rng.gen_range(0..n);
        let at = token_offsets[j].0;
        token_offsets[j] = (at, at);
        if j + 1 < n {
            token_offsets[j + 1].0 = at;
        }
    }

    let (l, h, t, d) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(2..=12));
    let mut attention = Vec::with_capacity(l * h * t * n);
    for _ in 0..l * h * t {
        let raw: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen::<f64>() }).collect();
        let s: f64 = raw.iter().sum::<f64>().max(1e-9);
        attention.extend(raw.iter().map(|v| (v / s) as f32));
    }
    let mut vec_f32 = |len: usize| -> Vec<f32> { (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect() };
    let mut answer_hidden = vec_f32(t * d);
    let unit_embeddings = vec_f32(support.len() * d);
    if t > 1 && rng.gen_bool(0.2) {
        answer_hidden[..d].iter_mut().for_each(|v| *v = 0.0);
    }
    let step_probs = (0..t)
        .map(|_| {
            let max: f64 = rng.gen_range(0.1..1.0);
            StepProb { chosen: max * rng.gen::<f64>(), max }
        })
        .collect();
    let bundle = TraceBundle {
        sample_id: "case".into(),
        generated_text: "ans: obj0".into(),
        layers: l,
        heads: h,
        answer_len: t,
        source_len: n,
        hidden_dim: d,
        attention,
        answer_hidden,
        unit_ids: support,
        unit_embeddings,
        token_offsets,
        step_probs,
        hidden_layer_index: -2,
        metadata: TraceMetadata { model: "random".into(), decoding: "greedy".into(), extra: BTreeMap::new() },
    };
    bundle.validate().expect("random bundle valid");
    RandomCase { bundle, layout, cues }
}

/// SSR by direct quadruple loop with per-token overlap tests.
pub fn naive_ssr(case: &RandomCase, scope: Scope) -> f64 {
    let b = &case.bundle;
    let overlaps =
        |(s, e): (usize, usize), u: &kgdiag::linearizer::UnitSpan| s < e && u.start < u.end && s < u.end && u.start < e;
    let in_core: Vec<bool> = b
        .token_offsets
        .iter()
        .map(|&tok| case.layout.units.iter().any(|u| case.cues.core.contains(&u.unit) && overlaps(tok, u)))
        .collect();
    let in_knowledge: Vec<bool> =
        b.token_offsets.iter().map(|&tok| case.layout.units.iter().any(|u| overlaps(tok, u))).collect();
    let mut total = 0.0;
    for l in 0..b.layers {
        for h in 0..b.heads {
            for i in 0..b.answer_len {
                let (mut ms, mut mbar) = (0.0f64, 0.0f64);
                for j in 0..b.source_len {
                    let a = b.attention[((l * b.heads + h) * b.answer_len + i) * b.source_len + j] as f64;
                    if in_core[j] {
                        ms += a;
                    } else if scope == Scope::FullSequence || in_knowledge[j] {
                        mbar += a;
                    }
                }
                total += match scope {
                    Scope::FullSequence => ms - mbar,
                    Scope::KnowledgeRegion => (ms - mbar) / (ms + mbar),
                };
            }
        }
    }
    total / (b.layers * b.heads * b.answer_len) as f64
}

/// SAS via the full cosine matrix.
pub fn naive_sas(bundle: &TraceBundle, support: &[UnitId]) -> f64 {
    let d = bundle.hidden_dim;
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let mut per_token = Vec::new();
    for t in 0..bundle.answer_len {
        let h = &bundle.answer_hidden[t * d..(t + 1) * d];
        if norm(h) == 0.0 {
            continue;
        }
        let mut row = Vec::new();
        for u in support {
            let k = bundle.unit_ids.iter().position(|x| x == u).unwrap();
            let g = &bundle.unit_embeddings[k * d..(k + 1) * d];
            if norm(g) == 0.0 {
                continue;
            }
            let dot: f64 = h.iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum();
            row.push(dot / (norm(h) * norm(g)));
        }
        per_token.push(row.into_iter().fold(f64::NEG_INFINITY, f64::max));
    }
    per_token.iter().sum::<f64>() / per_token.len() as f64
}

pub fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let eq = v.iter().filter(|y| *y == x).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect()
}

pub fn brute_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}
