// SPDX-License-Identifier: Apache-2.0

//! Second-order gradient boosting with logistic loss on dense features.
//!
//! Exact greedy split search, L2-regularized Newton leaf weights and a
//! minimum child hessian, with no row or column subsampling. Training is
//! fully deterministic.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        /// Rows with `x[feature] < threshold` go left.
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature] < *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub lambda: f64,
    pub min_child_weight: f64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams { rounds: 200, learning_rate: 0.1, max_depth: 2, lambda: 1.0, min_child_weight: 1.0 }
    }
}

pub fn sigmoid(m: f64) -> f64 {
    1.0 / (1.0 + (-m).exp())
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a BoostParams,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let g: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        self.nodes.push(Node::Leaf { value: -g / (h + self.params.lambda) * self.params.learning_rate });
        self.nodes.len() - 1
    }

    /// `sorted[f]` holds this node's rows ordered by feature `f`.
    fn build(&mut self, sorted: Vec<Vec<usize>>, depth: usize) -> usize {
        let rows = &sorted[0];
        if depth >= self.params.max_depth || rows.len() < 2 {
            return self.leaf(rows);
        }
        let lambda = self.params.lambda;
        let g_tot: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h_tot: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        let parent = g_tot * g_tot / (h_tot + lambda);

        let mut best: Option<(f64, usize, f64)> = None;
        for (f, order) in sorted.iter().enumerate() {
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..order.len() - 1 {
                let i = order[k];
                gl += self.grad[i];
                hl += self.hess[i];
                let (v, next) = (self.x[i][f], self.x[order[k + 1]][f]);
                if v == next {
                    continue;
                }
                let (gr, hr) = (g_tot - gl, h_tot - hl);
                if hl < self.params.min_child_weight || hr < self.params.min_child_weight {
                    continue;
                }
                let gain = gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent;
                if gain > 1e-12 && best.is_none_or(|(b, _, _)| gain > b) {
                    best = Some((gain, f, v + (next - v) / 2.0));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return self.leaf(rows);
        };
        let goes_left = |i: &usize| self.x[*i][feature] < threshold;
        let (left, right): (Vec<Vec<usize>>, Vec<Vec<usize>>) =
            sorted.iter().map(|order| order.iter().partition::<Vec<usize>, _>(|i| goes_left(i))).unzip();
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let l = self.build(left, depth + 1);
        let r = self.build(right, depth + 1);
        self.nodes[id] = Node::Split { feature, threshold, left: l, right: r };
        id
    }
}

/// Fit `params.rounds` trees to labels `y` (1 = positive). Returns the base
/// margin (prior log-odds) and the trees.
pub fn fit(x: &[Vec<f64>], y: &[bool], params: &BoostParams) -> (f64, Vec<Tree>) {
    let n = x.len();
    let n_features = x.first().map_or(0, Vec::len);
    let pos = y.iter().filter(|&&b| b).count() as f64;
    let prior = (pos / n as f64).clamp(1e-6, 1.0 - 1e-6);
    let base = (prior / (1.0 - prior)).ln();

    let presorted: Vec<Vec<usize>> = (0..n_features)
        .map(|f| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let mut margin = vec![base; n];
    let mut trees = Vec::with_capacity(params.rounds);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for _ in 0..params.rounds {
        for i in 0..n {
            let p = sigmoid(margin[i]);
            grad[i] = p - y[i] as u8 as f64;
            hess[i] = (p * (1.0 - p)).max(1e-16);
        }
        let mut b = Builder { x, grad: &grad, hess: &hess, params, nodes: Vec::new() };
        b.build(presorted.clone(), 0);
        let tree = Tree { nodes: b.nodes };
        for (m, row) in margin.iter_mut().zip(x) {
            *m += tree.predict(row);
        }
        trees.push(tree);
    }
    (base, trees)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stump_separates_threshold_data() {
        let x: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 / 100.0]).collect();
        let y: Vec<bool> = (0..100).map(|i| i >= 50).collect();
        let (base, trees) = fit(&x, &y, &BoostParams { rounds: 30, ..BoostParams::default() });
        let score = |v: f64| base + trees.iter().map(|t| t.predict(&[v])).sum::<f64>();
        assert!(score(0.9) > 1.0);
        assert!(score(0.1) < -1.0);
        assert!(trees.iter().all(|t| t.depth() <= 2));
        assert!(matches!(trees[0].nodes[0], Node::Split { threshold, .. } if (threshold - 0.495).abs() < 1e-9));
    }

    #[test]
    fn constant_feature_gives_leaves_only() {
        let x = vec![vec![1.0]; 10];
        let y: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let (_, trees) = fit(&x, &y, &BoostParams { rounds: 3, ..BoostParams::default() });
        assert!(trees.iter().all(|t| t.nodes.len() == 1));
    }
}
