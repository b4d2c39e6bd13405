// SPDX-License-Identifier: Apache-2.0

//! Fixtures shared by the benchmarks.

use kgdiag::{Graph, QASample, Triple};

/// A `side` x `side` lattice with rightward and downward edges, plus a
/// sample asking from the top-left corner to the bottom-right one.
pub fn lattice(side: usize) -> (Graph, QASample) {
    let name = |r: usize, c: usize| format!("e{r}_{c}");
    let mut triples = Vec::new();
    for r in 0..side {
        for c in 0..side {
            if c + 1 < side {
                triples.push(Triple::new(name(r, c), "right", name(r, c + 1)));
            }
            if r + 1 < side {
                triples.push(Triple::new(name(r, c), "down", name(r + 1, c)));
            }
        }
    }
    let graph = Graph::from_parts(triples, Vec::<(String, String)>::new(), Vec::<(String, String)>::new())
        .expect("lattice is well formed");
    let hop = 3.min(side - 1);
    let sample = QASample {
        sample_id: "lattice".into(),
        question: "corner".into(),
        question_entities: [name(0, 0)].into(),
        gold_answers: [name(hop, hop)].into(),
        gold_answer_entities: [name(hop, 0)].into(),
        table_id: None,
    };
    (graph, sample)
}
