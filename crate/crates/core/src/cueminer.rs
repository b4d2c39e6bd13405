// SPDX-License-Identifier: Apache-2.0

//! Core structural cues, subgraph trimming and supporting-context sets.
//!
//! For graphs the core cues are every triple on a shortest undirected path
//! between a question entity and a gold-answer entity. The trimmed subgraph
//! adds the best-scoring one-hop neighbours of those paths, and the
//! supporting context expands the core with a capped number of neighbours
//! per core entity. Ties are always broken by graph insertion order.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgstore::{EntityMatcher, Graph, QASample, Table, Triple, UnitId};
use crate::labeler::normalize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CueConfig {
    pub max_hops: usize,
    pub k_subgraph: usize,
    pub k_support: usize,
    pub per_entity_cap: usize,
    /// Relations allowed into the supporting context; `None` allows all.
    pub relation_allowlist: Option<BTreeSet<String>>,
}

impl Default for CueConfig {
    fn default() -> Self {
        CueConfig { max_hops: 3, k_subgraph: 20, k_support: 20, per_entity_cap: 3, relation_allowlist: None }
    }
}

impl CueConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_hops == 0 || self.k_support == 0 || self.per_entity_cap == 0 {
            return Err(Error::Invalid("max_hops, k_support and per_entity_cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Unit ids selected for one sample.
///
/// `core ⊆ support ⊆ trimmed`. `trimmed` is in graph order; `support` lists
/// the core first and then the admitted neighbours in selection order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueSets {
    pub sample_id: String,
    pub core: Vec<UnitId>,
    pub support: Vec<UnitId>,
    pub trimmed: Vec<UnitId>,
}

impl CueSets {
    pub fn core_set(&self) -> HashSet<UnitId> {
        self.core.iter().copied().collect()
    }

    pub fn is_nested(&self) -> bool {
        let support: HashSet<_> = self.support.iter().collect();
        let trimmed: HashSet<_> = self.trimmed.iter().collect();
        self.core.iter().all(|u| support.contains(u)) && self.support.iter().all(|u| trimmed.contains(u))
    }
}

/// Breadth-first distances from `source` over the undirected view, up to `limit`.
fn bfs(graph: &Graph, source: &str, limit: usize, allowed: Option<&HashSet<UnitId>>) -> HashMap<String, usize> {
    let mut dist = HashMap::new();
    dist.insert(source.to_string(), 0);
    let mut queue = VecDeque::from([source.to_string()]);
    while let Some(u) = queue.pop_front() {
        let d = dist[&u];
        if d == limit {
            continue;
        }
        for &id in graph.incident(&u) {
            if allowed.is_some_and(|a| !a.contains(&id)) {
                continue;
            }
            let t = &graph.triples()[id.index()];
            let v = t.other(&u).unwrap_or(&u);
            if !dist.contains_key(v) {
                dist.insert(v.to_string(), d + 1);
                queue.push_back(v.to_string());
            }
        }
    }
    dist
}

/// Triples on any shortest path (≤ `max_hops`) from a question entity to a
/// gold-answer entity, unioned over all pairs.
pub fn extract_core_cues(graph: &Graph, sample: &QASample, cfg: &CueConfig) -> Result<BTreeSet<UnitId>> {
    if sample.question_entities.is_empty() || sample.gold_answer_entities.is_empty() {
        return Err(Error::Invalid(format!("sample {}: needs question and gold-answer entities", sample.sample_id)));
    }
    for q in &sample.question_entities {
        if !graph.contains_entity(q) {
            return Err(Error::UnresolvedEntity { sample: sample.sample_id.clone(), entity: q.clone() });
        }
    }
    let answers: Vec<&String> = sample.gold_answer_entities.iter().filter(|a| graph.contains_entity(a)).collect();
    let mut from_answer: HashMap<&str, HashMap<String, usize>> = HashMap::new();
    let mut core = BTreeSet::new();
    for q in &sample.question_entities {
        let dq = bfs(graph, q, cfg.max_hops, None);
        for a in &answers {
            let Some(&total) = dq.get(a.as_str()) else { continue };
            if total == 0 {
                continue;
            }
            let da = from_answer.entry(a.as_str()).or_insert_with(|| bfs(graph, a, cfg.max_hops, None));
            for (u, &du) in &dq {
                if du >= total {
                    continue;
                }
                for &id in graph.incident(u) {
                    let t = &graph.triples()[id.index()];
                    let v = t.other(u).unwrap_or(u);
                    if da.get(v).is_some_and(|&dv| du + 1 + dv == total) {
                        core.insert(id);
                    }
                }
            }
        }
    }
    Ok(core)
}

/// Connectivity score of a candidate neighbour triple: 3 if it touches a path
/// entity, plus 2 for touching a question entity, plus 2 for an answer entity.
pub fn score_neighbor<S: std::borrow::Borrow<str> + Eq + std::hash::Hash>(
    triple: &Triple,
    path_entities: &HashSet<S>,
    question: &HashSet<S>,
    answer: &HashSet<S>,
) -> u32 {
    let touches = |set: &HashSet<S>| set.contains(triple.head.as_str()) || set.contains(triple.tail.as_str());
    3 * touches(path_entities) as u32 + 2 * touches(question) as u32 + 2 * touches(answer) as u32
}

fn entities_of(graph: &Graph, units: impl IntoIterator<Item = UnitId>) -> HashSet<&str> {
    let mut out = HashSet::new();
    for id in units {
        let t = &graph.triples()[id.index()];
        out.insert(t.head.as_str());
        out.insert(t.tail.as_str());
    }
    out
}

fn as_str_set(set: &BTreeSet<String>) -> HashSet<&str> {
    set.iter().map(String::as_str).collect()
}

/// Non-core triples incident to `entities`, sorted by score (descending) and
/// then by unit id.
fn ranked_neighbors(
    graph: &Graph,
    core: &BTreeSet<UnitId>,
    entities: &HashSet<&str>,
    question: &HashSet<&str>,
    answer: &HashSet<&str>,
    within: Option<&HashSet<UnitId>>,
) -> Vec<UnitId> {
    let mut ids: Vec<UnitId> = entities
        .iter()
        .flat_map(|e| graph.incident(e).iter().copied())
        .filter(|id| !core.contains(id) && within.is_none_or(|w| w.contains(id)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    // stable: equal scores keep ascending id order
    ids.sort_by_key(|id| std::cmp::Reverse(score_neighbor(&graph.triples()[id.index()], entities, question, answer)));
    ids
}

/// Core plus the best-scoring one-hop neighbours, up to `k_subgraph` units.
pub fn trim_subgraph(
    graph: &Graph,
    core: &BTreeSet<UnitId>,
    sample: &QASample,
    cfg: &CueConfig,
) -> Result<Vec<UnitId>> {
    if core.is_empty() {
        return Err(Error::Invalid(format!("sample {}: empty core", sample.sample_id)));
    }
    let path_entities = entities_of(graph, core.iter().copied());
    let q = as_str_set(&sample.question_entities);
    let a = as_str_set(&sample.gold_answer_entities);
    let budget = cfg.k_subgraph.saturating_sub(core.len());
    let mut result: BTreeSet<UnitId> = core.clone();
    result.extend(ranked_neighbors(graph, core, &path_entities, &q, &a, None).into_iter().take(budget));

    let allowed: HashSet<UnitId> = result.iter().copied().collect();
    let reachable = sample.question_entities.iter().any(|qe| {
        let d = bfs(graph, qe, usize::MAX, Some(&allowed));
        sample.gold_answer_entities.iter().any(|ae| d.contains_key(ae))
    });
    if !reachable {
        return Err(Error::Unreachable { sample: sample.sample_id.clone() });
    }
    Ok(result.into_iter().collect())
}

/// Core plus neighbour triples from the trimmed subgraph that touch a core
/// entity, at most `per_entity_cap` per core entity, truncated to
/// `k_support` after the core.
///
/// A neighbour is admitted only if every core entity it touches still has
/// capacity; it is then charged to each of them.
pub fn build_support_set(
    graph: &Graph,
    core: &BTreeSet<UnitId>,
    trimmed: &[UnitId],
    sample: &QASample,
    cfg: &CueConfig,
) -> Vec<UnitId> {
    let core_entities = entities_of(graph, core.iter().copied());
    let q = as_str_set(&sample.question_entities);
    let a = as_str_set(&sample.gold_answer_entities);
    let within: HashSet<UnitId> = trimmed.iter().copied().collect();

    let mut support: Vec<UnitId> = core.iter().copied().collect();
    let mut used: HashMap<&str, usize> = HashMap::new();
    for id in ranked_neighbors(graph, core, &core_entities, &q, &a, Some(&within)) {
        if support.len() >= cfg.k_support {
            break;
        }
        let t = &graph.triples()[id.index()];
        if let Some(allow) = &cfg.relation_allowlist {
            if !allow.contains(&t.relation) {
                continue;
            }
        }
        let touched: Vec<&str> = [t.head.as_str(), t.tail.as_str()]
            .into_iter()
            .filter(|e| core_entities.contains(e))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if touched.iter().all(|e| used.get(e).copied().unwrap_or(0) < cfg.per_entity_cap) {
            for e in touched {
                *used.entry(e).or_default() += 1;
            }
            support.push(id);
        }
    }
    support
}

/// Full graph cue mining for one sample.
pub fn mine_graph_cues(graph: &Graph, sample: &QASample, cfg: &CueConfig) -> Result<CueSets> {
    cfg.validate()?;
    let core = extract_core_cues(graph, sample, cfg)?;
    if core.is_empty() {
        return Err(Error::NoPath { sample: sample.sample_id.clone(), max_hops: cfg.max_hops });
    }
    let trimmed = trim_subgraph(graph, &core, sample, cfg)?;
    let support = build_support_set(graph, &core, &trimmed, sample, cfg);
    Ok(CueSets { sample_id: sample.sample_id.clone(), core: core.into_iter().collect(), support, trimmed })
}

/// Cue mining for a table whose units were produced by
/// [`Graph::from_table`].
///
/// Core units sit in a row that mentions a question entity (or under a
/// header named in the question) and hold a gold answer. The supporting
/// context adds every unit that mentions a question entity, holds a gold
/// answer, or sits under a header named in the question. The whole table is
/// the trimmed set.
pub fn mine_table_cues(graph: &Graph, table: &Table, sample: &QASample, cfg: &CueConfig) -> Result<CueSets> {
    cfg.validate()?;
    let q = as_str_set(&sample.question_entities);
    let golds: HashSet<String> = sample.gold_answers.iter().map(|g| normalize(g)).collect();
    let header_matcher = EntityMatcher::new(table.column_headers.iter().map(|h| (h.as_str(), h.as_str())));
    let headers_in_question = header_matcher.find(&sample.question);

    let rows_with_q: HashSet<&str> = table
        .rows
        .iter()
        .filter(|r| q.contains(r.entity.as_str()) || r.cells.iter().any(|c| q.contains(c.as_str())))
        .map(|r| r.entity.as_str())
        .collect();

    let holds_answer = |t: &Triple| golds.contains(&normalize(&t.tail));
    let header_hit = |t: &Triple| headers_in_question.contains(&t.relation);

    let mut core = BTreeSet::new();
    let mut related = Vec::new();
    for id in graph.unit_ids() {
        let t = &graph.triples()[id.index()];
        let in_q_row = rows_with_q.contains(t.head.as_str());
        if (in_q_row || header_hit(t)) && holds_answer(t) {
            core.insert(id);
        } else if q.contains(t.head.as_str()) || q.contains(t.tail.as_str()) || holds_answer(t) || header_hit(t) {
            related.push(id);
        }
    }
    if core.is_empty() {
        return Err(Error::Unreachable { sample: sample.sample_id.clone() });
    }
    let mut support: Vec<UnitId> = core.iter().copied().collect();
    let room = cfg.k_support.saturating_sub(support.len());
    support.extend(related.into_iter().take(room));
    Ok(CueSets {
        sample_id: sample.sample_id.clone(),
        core: core.into_iter().collect(),
        support,
        trimmed: graph.unit_ids().collect(),
    })
}
