// SPDX-License-Identifier: Apache-2.0

//! Knowledge graphs, tables and QA samples.
//!
//! All text is NFC-normalized on load so that character offsets computed
//! downstream (prompt spans, token offsets) are stable across producers.
//! Triples keep their direction for rendering; [`Graph::neighbors`] exposes
//! the undirected view used for path finding.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Index of a knowledge unit (triple or table cell) within its [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitId(pub u32);

impl UnitId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

/// One directed fact `(head, relation, tail)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Triple { head: head.into(), relation: relation.into(), tail: tail.into() }
    }

    /// True if either endpoint is `entity`.
    pub fn touches(&self, entity: &str) -> bool {
        self.head == entity || self.tail == entity
    }

    /// The endpoint opposite `entity`, if `entity` is an endpoint.
    pub fn other(&self, entity: &str) -> Option<&str> {
        if self.head == entity {
            Some(&self.tail)
        } else if self.tail == entity {
            Some(&self.head)
        } else {
            None
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.head.is_empty() || self.relation.is_empty() || self.tail.is_empty() {
            return Err(format!("empty field in triple {self:?}"));
        }
        Ok(())
    }
}

fn nfc(s: &str) -> String {
    s.nfc().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    TriplesTsv,
    Json,
}

impl GraphFormat {
    /// Guess the format from a file extension (`.json` vs anything else).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => GraphFormat::Json,
            _ => GraphFormat::TriplesTsv,
        }
    }
}

/// An immutable, deduplicated knowledge graph.
#[derive(Debug, Clone)]
pub struct Graph {
    triples: Vec<Triple>,
    entity_labels: BTreeMap<String, String>,
    relation_labels: BTreeMap<String, String>,
    adjacency: HashMap<String, Vec<UnitId>>,
    index: HashMap<Triple, UnitId>,
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.triples == other.triples
            && self.entity_labels == other.entity_labels
            && self.relation_labels == other.relation_labels
    }
}

impl Graph {
    /// Build a graph from raw parts.
    ///
    /// Triples are deduplicated keeping first occurrence. Label pairs are
    /// applied in order; an id seen twice with different labels is an error.
    /// Ids without an explicit label are labelled with themselves.
    pub fn from_parts<I, E, R>(triples: I, entity_labels: E, relation_labels: R) -> Result<Self>
    where
        I: IntoIterator<Item = Triple>,
        E: IntoIterator<Item = (String, String)>,
        R: IntoIterator<Item = (String, String)>,
    {
        let mut out = Graph {
            triples: Vec::new(),
            entity_labels: BTreeMap::new(),
            relation_labels: BTreeMap::new(),
            adjacency: HashMap::new(),
            index: HashMap::new(),
        };
        for (id, label) in entity_labels {
            insert_label(&mut out.entity_labels, nfc(&id), nfc(&label))?;
        }
        for (id, label) in relation_labels {
            insert_label(&mut out.relation_labels, nfc(&id), nfc(&label))?;
        }
        for t in triples {
            let t = Triple::new(nfc(&t.head), nfc(&t.relation), nfc(&t.tail));
            t.check().map_err(Error::Invalid)?;
            out.push(t);
        }
        Ok(out)
    }

    fn push(&mut self, t: Triple) {
        if self.index.contains_key(&t) {
            return;
        }
        let id = UnitId(self.triples.len() as u32);
        for e in [&t.head, &t.tail] {
            self.entity_labels.entry(e.clone()).or_insert_with(|| e.clone());
        }
        self.relation_labels.entry(t.relation.clone()).or_insert_with(|| t.relation.clone());
        self.adjacency.entry(t.head.clone()).or_default().push(id);
        if t.tail != t.head {
            self.adjacency.entry(t.tail.clone()).or_default().push(id);
        }
        self.index.insert(t.clone(), id);
        self.triples.push(t);
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triple(&self, id: UnitId) -> Option<&Triple> {
        self.triples.get(id.index())
    }

    pub fn unit_ids(&self) -> impl Iterator<Item = UnitId> + '_ {
        (0..self.triples.len() as u32).map(UnitId)
    }

    pub fn id_of(&self, t: &Triple) -> Option<UnitId> {
        self.index.get(t).copied()
    }

    pub fn entity_labels(&self) -> &BTreeMap<String, String> {
        &self.entity_labels
    }

    pub fn relation_labels(&self) -> &BTreeMap<String, String> {
        &self.relation_labels
    }

    pub fn entity_label(&self, id: &str) -> Option<&str> {
        self.entity_labels.get(id).map(String::as_str)
    }

    pub fn relation_label(&self, id: &str) -> Option<&str> {
        self.relation_labels.get(id).map(String::as_str)
    }

    /// Entities that appear in at least one triple.
    pub fn contains_entity(&self, id: &str) -> bool {
        self.adjacency.contains_key(id)
    }

    /// Number of distinct entities referenced by triples.
    pub fn entity_count(&self) -> usize {
        self.adjacency.len()
    }

    /// Triples incident to `entity` in insertion order (undirected view).
    pub fn incident(&self, entity: &str) -> &[UnitId] {
        self.adjacency.get(entity).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Recompute the adjacency index from the triple list and compare.
    pub fn verify_index(&self) -> bool {
        let rebuilt = Graph::from_parts(self.triples.clone(), Vec::new(), Vec::new());
        match rebuilt {
            Ok(g) => g.adjacency == self.adjacency && g.triples == self.triples,
            Err(_) => false,
        }
    }

    /// Serialize as tab-separated `head\trelation\ttail` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for t in &self.triples {
            s.push_str(&t.head);
            s.push('\t');
            s.push_str(&t.relation);
            s.push('\t');
            s.push_str(&t.tail);
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "triples": self.triples.iter().map(|t| [&t.head, &t.relation, &t.tail]).collect::<Vec<_>>(),
            "entity_labels": self.entity_labels,
            "relation_labels": self.relation_labels,
        })
    }

    /// Build a graph whose units are the cells of `table`.
    pub fn from_table(table: &Table) -> Result<Self> {
        table.validate()?;
        Graph::from_parts(table_to_units(table), Vec::new(), Vec::new())
    }
}

fn insert_label(map: &mut BTreeMap<String, String>, id: String, label: String) -> Result<()> {
    match map.get(&id) {
        Some(prev) if *prev != label => Err(Error::ConflictingLabel { entity: id, first: prev.clone(), second: label }),
        Some(_) => Ok(()),
        None => {
            map.insert(id, label);
            Ok(())
        }
    }
}

/// A JSON object read as an ordered list of pairs, keeping duplicate keys.
#[derive(Debug, Default)]
struct PairList(Vec<(String, String)>);

impl<'de> Deserialize<'de> for PairList {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = PairList;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object of id -> label strings")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<PairList, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, String>()? {
                    out.push((k, v));
                }
                Ok(PairList(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Deserialize)]
struct JsonGraph {
    triples: Vec<(String, String, String)>,
    #[serde(default)]
    entity_labels: PairList,
    #[serde(default)]
    relation_labels: PairList,
}

/// Load a graph from disk.
pub fn load_graph(path: &Path, format: GraphFormat) -> Result<Graph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        GraphFormat::TriplesTsv => parse_tsv(&text, path),
        GraphFormat::Json => {
            let g: JsonGraph = serde_json::from_str(&text)?;
            Graph::from_parts(
                g.triples.into_iter().map(|(h, r, t)| Triple::new(h, r, t)),
                g.entity_labels.0,
                g.relation_labels.0,
            )
        }
    }
}

/// Parse triples-TSV text. `origin` is only used in error messages.
pub fn parse_tsv(text: &str, origin: &Path) -> Result<Graph> {
    let mut triples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, message };
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let t = Triple::new(fields[0].trim(), fields[1].trim(), fields[2].trim());
        t.check().map_err(parse_err)?;
        triples.push(t);
    }
    Graph::from_parts(triples, Vec::new(), Vec::new())
}

/// A question with its gold answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub sample_id: String,
    pub question: String,
    #[serde(default)]
    pub question_entities: BTreeSet<String>,
    pub gold_answers: BTreeSet<String>,
    #[serde(default)]
    pub gold_answer_entities: BTreeSet<String>,
    /// Set when the sample is answered from a table instead of the graph.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_id: Option<String>,
}

impl QASample {
    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::Invalid(format!("sample {}: empty question", self.sample_id)));
        }
        if self.gold_answers.is_empty() {
            return Err(Error::Invalid(format!("sample {}: no gold answers", self.sample_id)));
        }
        Ok(())
    }

    fn normalized(self) -> Self {
        let set = |s: BTreeSet<String>| s.iter().map(|x| nfc(x)).collect();
        QASample {
            sample_id: self.sample_id,
            question: nfc(&self.question),
            question_entities: set(self.question_entities),
            gold_answers: set(self.gold_answers),
            gold_answer_entities: set(self.gold_answer_entities),
            table_id: self.table_id,
        }
    }
}

/// Parse a JSON-lines file, reporting the line number of the first bad record.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

/// Load QA samples from a JSON-lines file.
pub fn load_samples(path: &Path) -> Result<Vec<QASample>> {
    let raw: Vec<QASample> = read_jsonl(path)?;
    raw.into_iter()
        .map(|s| {
            let s = s.normalized();
            s.validate()?;
            Ok(s)
        })
        .collect()
}

/// One table row: the entity it describes plus one value per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub entity: String,
    pub cells: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub table_id: String,
    pub column_headers: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl Table {
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.cells.len() != self.column_headers.len() {
                return Err(Error::Invalid(format!(
                    "table {}: row {i} has {} cells, expected {}",
                    self.table_id,
                    row.cells.len(),
                    self.column_headers.len()
                )));
            }
        }
        Ok(())
    }

    fn normalized(self) -> Self {
        Table {
            table_id: self.table_id,
            column_headers: self.column_headers.iter().map(|h| nfc(h)).collect(),
            rows: self
                .rows
                .into_iter()
                .map(|r| TableRow { entity: nfc(&r.entity), cells: r.cells.iter().map(|c| nfc(c)).collect() })
                .collect(),
        }
    }
}

/// Load tables from a JSON-lines file, one table per line.
pub fn load_tables(path: &Path) -> Result<Vec<Table>> {
    let raw: Vec<Table> = read_jsonl(path)?;
    raw.into_iter()
        .map(|t| {
            let t = t.normalized();
            t.validate()?;
            Ok(t)
        })
        .collect()
}

/// Flatten a table into `(row-entity, column-header, value)` units, row-major,
/// skipping empty cells.
pub fn table_to_units(table: &Table) -> Vec<Triple> {
    table
        .rows
        .iter()
        .flat_map(|row| {
            table
                .column_headers
                .iter()
                .zip(&row.cells)
                .filter(|(_, v)| !v.trim().is_empty())
                .map(|(h, v)| Triple::new(row.entity.clone(), h.clone(), v.clone()))
        })
        .collect()
}

fn fold(s: &str) -> Vec<char> {
    s.chars().flat_map(char::to_lowercase).collect()
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric()
}

/// Case-insensitive whole-word matcher over a set of labels.
///
/// Scans left to right; at each position the longest label that fits wins
/// and the scan resumes after it.
#[derive(Debug, Clone)]
pub struct EntityMatcher {
    by_label: HashMap<Vec<char>, Vec<String>>,
    lengths: Vec<usize>,
}

impl EntityMatcher {
    pub fn new<'a, I>(labels: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut by_label: HashMap<Vec<char>, Vec<String>> = HashMap::new();
        for (id, label) in labels {
            let key = fold(label.trim());
            if key.is_empty() {
                continue;
            }
            let ids = by_label.entry(key).or_default();
            if !ids.iter().any(|x| x == id) {
                ids.push(id.to_string());
            }
        }
        let mut lengths: Vec<usize> = by_label.keys().map(Vec::len).collect::<HashSet<_>>().into_iter().collect();
        lengths.sort_unstable_by(|a, b| b.cmp(a));
        EntityMatcher { by_label, lengths }
    }

    /// Matcher over every entity label of `graph`.
    pub fn for_graph(graph: &Graph) -> Self {
        EntityMatcher::new(
            graph
                .entity_labels()
                .iter()
                .filter(|(id, _)| graph.contains_entity(id))
                .map(|(id, l)| (id.as_str(), l.as_str())),
        )
    }

    pub fn find(&self, text: &str) -> BTreeSet<String> {
        let q = fold(text);
        let n = q.len();
        let mut out = BTreeSet::new();
        let mut i = 0;
        while i < n {
            let mut advanced = false;
            for &len in &self.lengths {
                if i + len > n {
                    continue;
                }
                let cand = &q[i..i + len];
                let start_ok = i == 0 || !is_word(q[i - 1]) || !is_word(cand[0]);
                let end_ok = i + len == n || !is_word(q[i + len]) || !is_word(cand[len - 1]);
                if !(start_ok && end_ok) {
                    continue;
                }
                if let Some(ids) = self.by_label.get(cand) {
                    out.extend(ids.iter().cloned());
                    i += len;
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                i += 1;
            }
        }
        out
    }
}

/// Entities of `graph` whose label occurs in `question` as whole words.
pub fn match_question_entities(question: &str, graph: &Graph) -> BTreeSet<String> {
    EntityMatcher::for_graph(graph).find(question)
}
