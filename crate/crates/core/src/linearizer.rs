// SPDX-License-Identifier: Apache-2.0

//! Prompt rendering with an exact character-span layout.
//!
//! Offsets are half-open ranges counted in Unicode scalar values (Python
//! `str` indices), which is what tokenizer offset mappings report.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgstore::{Graph, QASample, UnitId};
use crate::labeler::ANSWER_PREFIX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// Half-open interval overlap; empty intervals overlap nothing.
    pub fn overlaps(&self, other: &Span) -> bool {
        !self.is_empty() && !other.is_empty() && self.start < other.end && other.start < self.end
    }
}

/// Fixed wording around the knowledge block. Bump `id` whenever any text changes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub header: String,
    pub context_label: String,
    pub question_label: String,
}

impl PromptTemplate {
    /// Default knowledge-graph template.
    pub fn kg_v1() -> Self {
        PromptTemplate {
            id: "kg-v1".into(),
            header: "Answer the question using the knowledge graph facts below. Each fact is written as \
                     \"subject relation object\" on its own line. Reply with the answer entities on one \
                     line that starts with \"ans:\"."
                .into(),
            context_label: "Facts:".into(),
            question_label: "Question:".into(),
        }
    }

    /// Default table template; cells are written as "row column value".
    pub fn table_v1() -> Self {
        PromptTemplate {
            id: "table-v1".into(),
            header: "Answer the question using the table cells below. Each cell is written as \
                     \"row column value\" on its own line. Reply with the answer on one line that \
                     starts with \"ans:\"."
                .into(),
            context_label: "Table:".into(),
            question_label: "Question:".into(),
        }
    }

    pub fn by_id(id: &str) -> Option<Self> {
        match id {
            "kg-v1" => Some(Self::kg_v1()),
            "table-v1" => Some(Self::table_v1()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSpan {
    pub unit: UnitId,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl UnitSpan {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

/// A rendered prompt plus the character span of every region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub sample_id: String,
    pub template_id: String,
    pub prompt_text: String,
    /// Knowledge units in prompt order.
    pub units: Vec<UnitSpan>,
    pub knowledge_span: Span,
    pub question_span: Span,
    pub instruction_spans: Vec<Span>,
    pub answer_prefix: String,
    pub answer_span: Span,
}

/// Substring by char offsets.
pub fn char_slice(s: &str, span: Span) -> &str {
    let mut idx = s.char_indices().map(|(b, _)| b).chain(std::iter::once(s.len()));
    let start = idx.nth(span.start).unwrap_or(s.len());
    let end = if span.end == span.start { start } else { idx.nth(span.end - span.start - 1).unwrap_or(s.len()) };
    &s[start..end]
}

fn clean(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

/// Render one unit as `"<head> <relation> <tail>"` using the graph labels.
pub fn render_unit(graph: &Graph, id: UnitId) -> Result<String> {
    let t = graph.triple(id).ok_or_else(|| Error::MissingLabel(id.to_string()))?;
    let head = graph.entity_label(&t.head).ok_or_else(|| Error::MissingLabel(t.head.clone()))?;
    let rel = graph.relation_label(&t.relation).ok_or_else(|| Error::MissingLabel(t.relation.clone()))?;
    let tail = graph.entity_label(&t.tail).ok_or_else(|| Error::MissingLabel(t.tail.clone()))?;
    Ok(format!("{} {} {}", clean(head), clean(rel), clean(tail)))
}

struct Writer {
    text: String,
    pos: usize,
}

impl Writer {
    fn push(&mut self, s: &str) -> Span {
        let start = self.pos;
        self.text.push_str(s);
        self.pos += s.chars().count();
        Span::new(start, self.pos)
    }
}

/// Render `units` (in the given order) into a prompt for `sample`.
pub fn linearize(
    units: &[UnitId],
    graph: &Graph,
    sample: &QASample,
    template: &PromptTemplate,
) -> Result<PromptLayout> {
    let lines = units.iter().map(|&u| Ok((u, render_unit(graph, u)?))).collect::<Result<Vec<_>>>()?;
    Ok(assemble(&sample.sample_id, &clean(&sample.question), template, &lines))
}

fn assemble(sample_id: &str, question: &str, template: &PromptTemplate, lines: &[(UnitId, String)]) -> PromptLayout {
    let mut w = Writer { text: String::new(), pos: 0 };
    let mut instruction_spans = vec![w.push(&template.header)];
    w.push("\n\n");
    instruction_spans.push(w.push(&template.context_label));
    w.push("\n");
    let region_start = w.pos;
    let mut units = Vec::with_capacity(lines.len());
    for (i, (u, line)) in lines.iter().enumerate() {
        if i > 0 {
            w.push("\n");
        }
        let s = w.push(line);
        units.push(UnitSpan { unit: *u, start: s.start, end: s.end, text: line.clone() });
    }
    let knowledge_span = Span::new(region_start, w.pos);
    w.push("\n\n");
    instruction_spans.push(w.push(&template.question_label));
    w.push(" ");
    let question_span = w.push(question);
    w.push("\n");
    let answer_span = w.push(ANSWER_PREFIX);
    PromptLayout {
        sample_id: sample_id.to_string(),
        template_id: template.id.clone(),
        prompt_text: w.text,
        units,
        knowledge_span,
        question_span,
        instruction_spans,
        answer_prefix: ANSWER_PREFIX.to_string(),
        answer_span,
    }
}

impl PromptLayout {
    pub fn unit_order(&self) -> Vec<UnitId> {
        self.units.iter().map(|u| u.unit).collect()
    }

    pub fn span_of(&self, unit: UnitId) -> Option<Span> {
        self.units.iter().find(|u| u.unit == unit).map(UnitSpan::span)
    }

    pub fn char_len(&self) -> usize {
        self.prompt_text.chars().count()
    }

    /// Check every layout invariant; returns a description of the first failure.
    pub fn check(&self) -> std::result::Result<(), String> {
        let n = self.char_len();
        let mut all: Vec<Span> = self.units.iter().map(UnitSpan::span).collect();
        all.push(self.question_span);
        all.push(self.answer_span);
        all.extend(self.instruction_spans.iter().copied());
        for s in &all {
            if s.start > s.end || s.end > n {
                return Err(format!("span {s:?} outside prompt of length {n}"));
            }
        }
        let mut sorted: Vec<Span> = all.iter().copied().filter(|s| !s.is_empty()).collect();
        sorted.sort();
        for w in sorted.windows(2) {
            if w[0].end > w[1].start {
                return Err(format!("spans {:?} and {:?} overlap", w[0], w[1]));
            }
        }
        let mut seen = HashSet::new();
        for u in &self.units {
            if !seen.insert(u.unit) {
                return Err(format!("unit {} appears twice", u.unit));
            }
            if char_slice(&self.prompt_text, u.span()) != u.text {
                return Err(format!("span of unit {} does not match its text", u.unit));
            }
        }
        let joined = self.units.iter().map(|u| u.text.as_str()).collect::<Vec<_>>().join("\n");
        if char_slice(&self.prompt_text, self.knowledge_span) != joined {
            return Err("knowledge region differs from the joined unit lines".into());
        }
        if char_slice(&self.prompt_text, self.answer_span) != self.answer_prefix {
            return Err("answer prefix span mismatch".into());
        }
        Ok(())
    }
}

/// Shuffle the non-core units among the non-core positions, keeping core
/// units where they are. Deterministic in `seed`.
pub fn permute_layout(layout: &PromptLayout, core: &HashSet<UnitId>, seed: u64) -> PromptLayout {
    let free: Vec<usize> = (0..layout.units.len()).filter(|&i| !core.contains(&layout.units[i].unit)).collect();
    let mut moved: Vec<(UnitId, String)> =
        free.iter().map(|&i| (layout.units[i].unit, layout.units[i].text.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    moved.shuffle(&mut rng);

    let mut lines: Vec<(UnitId, String)> = layout.units.iter().map(|u| (u.unit, u.text.clone())).collect();
    for (slot, item) in free.into_iter().zip(moved) {
        lines[slot] = item;
    }

    // Same multiset of lines, so the region keeps its length and every span
    // outside it is unchanged.
    let mut out = layout.clone();
    let mut region = String::new();
    let mut pos = layout.knowledge_span.start;
    out.units.clear();
    for (i, (u, line)) in lines.into_iter().enumerate() {
        if i > 0 {
            region.push('\n');
            pos += 1;
        }
        let len = line.chars().count();
        region.push_str(&line);
        out.units.push(UnitSpan { unit: u, start: pos, end: pos + len, text: line });
        pos += len;
    }
    let before = char_slice(&layout.prompt_text, Span::new(0, layout.knowledge_span.start));
    let after = char_slice(&layout.prompt_text, Span::new(layout.knowledge_span.end, layout.char_len()));
    out.prompt_text = format!("{before}{region}{after}");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgstore::Triple;
    use std::collections::BTreeSet;

    fn sample() -> QASample {
        QASample {
            sample_id: "s1".into(),
            question: "when was Conspiracy released".into(),
            question_entities: BTreeSet::new(),
            gold_answers: BTreeSet::from(["2001".to_string()]),
            gold_answer_entities: BTreeSet::new(),
            table_id: None,
        }
    }

    fn chain(n: usize) -> Graph {
        let triples = (0..n).map(|i| Triple::new(format!("e{i}"), format!("rel_{i}"), format!("e{}", i + 1)));
        Graph::from_parts(triples, Vec::new(), Vec::new()).unwrap()
    }

    #[test]
    fn single_triple_line() {
        let g = Graph::from_parts([Triple::new("Conspiracy", "release_year", "2001")], Vec::new(), Vec::new()).unwrap();
        let l = linearize(&[UnitId(0)], &g, &sample(), &PromptTemplate::kg_v1()).unwrap();
        assert_eq!(l.units[0].text, "Conspiracy release_year 2001");
        assert_eq!(char_slice(&l.prompt_text, l.units[0].span()), "Conspiracy release_year 2001");
        assert!(l.prompt_text.ends_with("Question: when was Conspiracy released\nans:"));
        l.check().unwrap();
    }

    #[test]
    fn zero_units() {
        let g = chain(1);
        let l = linearize(&[], &g, &sample(), &PromptTemplate::kg_v1()).unwrap();
        assert!(l.units.is_empty());
        assert!(l.knowledge_span.is_empty());
        assert_eq!(char_slice(&l.prompt_text, l.question_span), "when was Conspiracy released");
        l.check().unwrap();
    }

    #[test]
    fn twenty_units_reextract() {
        let g = chain(20);
        let ids: Vec<UnitId> = g.unit_ids().collect();
        let l = linearize(&ids, &g, &sample(), &PromptTemplate::kg_v1()).unwrap();
        assert_eq!(l.units.len(), 20);
        for (i, u) in l.units.iter().enumerate() {
            assert_eq!(char_slice(&l.prompt_text, u.span()), render_unit(&g, UnitId(i as u32)).unwrap());
        }
        l.check().unwrap();
    }

    #[test]
    fn unknown_unit_is_error() {
        let g = chain(1);
        assert!(linearize(&[UnitId(5)], &g, &sample(), &PromptTemplate::kg_v1()).is_err());
    }

    #[test]
    fn multibyte_offsets_are_chars() {
        let g = Graph::from_parts([Triple::new("Amélie", "directed_by", "Jean-Pierre Jeunet")], Vec::new(), Vec::new())
            .unwrap();
        let l = linearize(&[UnitId(0)], &g, &sample(), &PromptTemplate::kg_v1()).unwrap();
        l.check().unwrap();
        assert_eq!(l.units[0].end - l.units[0].start, "Amélie directed_by Jean-Pierre Jeunet".chars().count());
    }

    #[test]
    fn permutation_keeps_core_and_lines() {
        let g = chain(12);
        let ids: Vec<UnitId> = g.unit_ids().collect();
        let l = linearize(&ids, &g, &sample(), &PromptTemplate::kg_v1()).unwrap();
        let core: HashSet<UnitId> = [UnitId(2), UnitId(7)].into();
        let p = permute_layout(&l, &core, 9);
        p.check().unwrap();
        assert_eq!(p.units[2].unit, UnitId(2));
        assert_eq!(p.units[7].unit, UnitId(7));
        let mut a: Vec<_> = l.units.iter().map(|u| u.text.clone()).collect();
        let mut b: Vec<_> = p.units.iter().map(|u| u.text.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_eq!(p.question_span, l.question_span);
        assert_eq!(permute_layout(&l, &core, 9), p);
        assert_ne!(permute_layout(&l, &core, 10).unit_order(), l.unit_order());
    }

    #[test]
    fn all_core_is_identity() {
        let g = chain(4);
        let ids: Vec<UnitId> = g.unit_ids().collect();
        let l = linearize(&ids, &g, &sample(), &PromptTemplate::kg_v1()).unwrap();
        let core: HashSet<UnitId> = ids.iter().copied().collect();
        assert_eq!(permute_layout(&l, &core, 3), l);
    }

    #[test]
    fn two_free_units_give_one_of_two_orders() {
        let g = chain(2);
        let ids: Vec<UnitId> = g.unit_ids().collect();
        let l = linearize(&ids, &g, &sample(), &PromptTemplate::kg_v1()).unwrap();
        let orders: HashSet<Vec<UnitId>> =
            (0..32).map(|s| permute_layout(&l, &HashSet::new(), s).unit_order()).collect();
        assert_eq!(orders.len(), 2);
    }
}
