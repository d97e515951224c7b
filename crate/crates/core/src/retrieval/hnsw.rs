//! Hierarchical navigable small-world graph over unit vectors, scored by dot
//! product (higher is closer). Layer assignment uses a seeded ChaCha stream so
//! identical inputs always build identical graphs.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnswParams {
    /// Max links per node above layer 0; layer 0 allows twice as many.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams { m: 16, ef_construction: 200, ef_search: 128, seed: 0x5eed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    score: f64,
    node: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    // higher score first; lower node id wins ties
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HnswGraph {
    pub(crate) params: HnswParams,
    pub(crate) entry: Option<u32>,
    /// `links[node][layer]` for layers `0..=level(node)`.
    pub(crate) links: Vec<Vec<Vec<u32>>>,
}

impl HnswGraph {
    pub(crate) fn build(vectors: &[Vec<f64>], params: HnswParams) -> Self {
        let mut graph = HnswGraph { params, entry: None, links: Vec::with_capacity(vectors.len()) };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let level_mult = 1.0 / (params.m.max(2) as f64).ln();
        for node in 0..vectors.len() {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            let level = ((-u.ln()) * level_mult).floor() as usize;
            graph.insert(vectors, node as u32, level.min(16));
        }
        graph
    }

    pub(crate) fn level_of(&self, node: u32) -> usize {
        self.links[node as usize].len() - 1
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            self.params.m * 2
        } else {
            self.params.m
        }
    }

    fn insert(&mut self, vectors: &[Vec<f64>], node: u32, level: usize) {
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry else {
            self.entry = Some(node);
            return;
        };
        let query = &vectors[node as usize];
        let top = self.level_of(entry);
        let mut eps = vec![Scored { score: dot(query, &vectors[entry as usize]), node: entry }];
        for layer in (level + 1..=top).rev() {
            eps = self.search_layer(vectors, query, &eps, 1, layer);
        }
        for layer in (0..=level.min(top)).rev() {
            let candidates = self.search_layer(vectors, query, &eps, self.params.ef_construction, layer);
            let chosen = self.select_neighbors(vectors, &candidates, self.params.m);
            self.links[node as usize][layer] = chosen.iter().map(|s| s.node).collect();
            for s in &chosen {
                self.link_back(vectors, s.node, node, layer);
            }
            eps = candidates;
        }
        if level > top {
            self.entry = Some(node);
        }
    }

    fn link_back(&mut self, vectors: &[Vec<f64>], from: u32, to: u32, layer: usize) {
        let cap = self.max_links(layer);
        let list = &mut self.links[from as usize][layer];
        list.push(to);
        if list.len() <= cap {
            return;
        }
        let base = &vectors[from as usize];
        let mut scored: Vec<Scored> = list
            .iter()
            .map(|&n| Scored { score: dot(base, &vectors[n as usize]), node: n })
            .collect();
        scored.sort_by(|a, b| b.cmp(a));
        let kept = self.select_neighbors(vectors, &scored, cap);
        self.links[from as usize][layer] = kept.into_iter().map(|s| s.node).collect();
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every neighbour kept so far, then top up with the closest rejects.
    fn select_neighbors(&self, vectors: &[Vec<f64>], sorted: &[Scored], m: usize) -> Vec<Scored> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        let mut rejected = Vec::new();
        for &c in sorted {
            if kept.len() >= m {
                break;
            }
            let cv = &vectors[c.node as usize];
            if kept.iter().all(|k| dot(cv, &vectors[k.node as usize]) < c.score) {
                kept.push(c);
            } else {
                rejected.push(c);
            }
        }
        for c in rejected {
            if kept.len() >= m {
                break;
            }
            kept.push(c);
        }
        kept
    }

    /// Best-first search of one layer; returns up to `ef` nodes sorted by descending score.
    fn search_layer(
        &self,
        vectors: &[Vec<f64>],
        query: &[f64],
        entry_points: &[Scored],
        ef: usize,
        layer: usize,
    ) -> Vec<Scored> {
        let mut visited: HashSet<u32> = entry_points.iter().map(|s| s.node).collect();
        let mut candidates: BinaryHeap<Scored> = entry_points.iter().copied().collect();
        // min-heap of the current best `ef`
        let mut best: BinaryHeap<std::cmp::Reverse<Scored>> =
            entry_points.iter().copied().map(std::cmp::Reverse).collect();
        while best.len() > ef {
            best.pop();
        }
        while let Some(current) = candidates.pop() {
            let worst = best.peek().map(|r| r.0);
            if let Some(w) = worst {
                if best.len() >= ef && current.score < w.score {
                    break;
                }
            }
            let Some(neighbors) = self.links[current.node as usize].get(layer) else {
                continue;
            };
            for &n in neighbors {
                if !visited.insert(n) {
                    continue;
                }
                let s = Scored { score: dot(query, &vectors[n as usize]), node: n };
                let admit = best.len() < ef || best.peek().is_some_and(|w| s > w.0);
                if admit {
                    candidates.push(s);
                    best.push(std::cmp::Reverse(s));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = best.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Approximate `ef` nearest nodes to `query` as `(node, score)`, best first.
    pub(crate) fn search(&self, vectors: &[Vec<f64>], query: &[f64], ef: usize) -> Vec<(u32, f64)> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        let mut eps = vec![Scored { score: dot(query, &vectors[entry as usize]), node: entry }];
        for layer in (1..=self.level_of(entry)).rev() {
            eps = self.search_layer(vectors, query, &eps, 1, layer);
        }
        self.search_layer(vectors, query, &eps, ef.max(1), 0)
            .into_iter()
            .map(|s| (s.node, s.score))
            .collect()
    }
}
