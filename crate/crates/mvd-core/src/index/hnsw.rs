//! Layered navigable small-world graph over inner-product similarity.
//!
//! Construction is fully deterministic: node levels come from a SplitMix64
//! hash of the record ordinal rather than a stored RNG state, so rebuilding
//! the graph from a reloaded record list reproduces the same structure and
//! the same search results.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use crate::index::{dot_f32, IndexConfig, IndexRecord};
use crate::numeric::splitmix64;

const LEVEL_SALT: u64 = 0x6d76645f686e7377;
const MAX_LEVEL: u8 = 12;

/// Max-heap entry ordered by score, ties by lower id.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    score: f64,
    id: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.id.cmp(&self.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Graph {
    levels: Vec<u8>,
    layer0: Vec<Vec<u32>>,
    upper: Vec<HashMap<u32, Vec<u32>>>,
    entry: u32,
    max_level: u8,
}

fn assigned_level(ord: usize, m: usize) -> u8 {
    let h = splitmix64(ord as u64 ^ LEVEL_SALT);
    // Map to (0, 1), then geometric via inverse CDF with mL = 1/ln(m).
    let u = (h as f64 + 0.5) / (u64::MAX as f64 + 1.0);
    let ml = 1.0 / (m as f64).ln();
    let lvl = (-u.ln() * ml).floor();
    (lvl as u64).min(MAX_LEVEL as u64) as u8
}

impl Graph {
    pub(crate) fn build(records: &[IndexRecord], cfg: &IndexConfig) -> Graph {
        let n = records.len();
        let m = cfg.max_degree.max(2);
        let m0 = 2 * m;
        let mut g = Graph {
            levels: (0..n).map(|i| assigned_level(i, m)).collect(),
            layer0: vec![Vec::new(); n],
            upper: vec![HashMap::new(); MAX_LEVEL as usize + 1],
            entry: 0,
            max_level: 0,
        };
        if n == 0 {
            return g;
        }
        g.max_level = g.levels[0];
        for lvl in 1..=g.levels[0] {
            g.upper[lvl as usize].insert(0, Vec::new());
        }
        for i in 1..n {
            g.insert(records, i as u32, cfg, m, m0);
        }
        g
    }

    fn neighbors(&self, node: u32, level: u8) -> &[u32] {
        if level == 0 {
            &self.layer0[node as usize]
        } else {
            self.upper[level as usize]
                .get(&node)
                .map(|v| v.as_slice())
                .unwrap_or(&[])
        }
    }

    fn neighbors_mut(&mut self, node: u32, level: u8) -> &mut Vec<u32> {
        if level == 0 {
            &mut self.layer0[node as usize]
        } else {
            self.upper[level as usize].entry(node).or_default()
        }
    }

    /// Greedy single-path descent at one level.
    fn greedy(&self, records: &[IndexRecord], query: &[f32], start: u32, level: u8) -> u32 {
        let mut cur = start;
        let mut cur_score = dot_f32(query, &records[cur as usize].vector);
        loop {
            let mut improved = false;
            for &nb in self.neighbors(cur, level) {
                let s = dot_f32(query, &records[nb as usize].vector);
                if s > cur_score {
                    cur = nb;
                    cur_score = s;
                    improved = true;
                }
            }
            if !improved {
                return cur;
            }
        }
    }

    /// Beam search at one level; returns up to `ef` best nodes, best first.
    fn search_layer(
        &self,
        records: &[IndexRecord],
        query: &[f32],
        entry: u32,
        ef: usize,
        level: u8,
    ) -> Vec<Scored> {
        let mut visited = vec![false; records.len()];
        visited[entry as usize] = true;
        let entry_scored = Scored {
            score: dot_f32(query, &records[entry as usize].vector),
            id: entry,
        };
        // `candidates` pops the best unexpanded node; `results` keeps the ef
        // best seen so far with the worst on top.
        let mut candidates = BinaryHeap::from([entry_scored]);
        let mut results: BinaryHeap<std::cmp::Reverse<Scored>> =
            BinaryHeap::from([std::cmp::Reverse(entry_scored)]);

        while let Some(best) = candidates.pop() {
            let worst = results.peek().expect("results never empty").0;
            if results.len() >= ef && best.score < worst.score {
                break;
            }
            for &nb in self.neighbors(best.id, level) {
                if visited[nb as usize] {
                    continue;
                }
                visited[nb as usize] = true;
                let s = Scored {
                    score: dot_f32(query, &records[nb as usize].vector),
                    id: nb,
                };
                let worst = results.peek().expect("nonempty").0;
                if results.len() < ef || s.score > worst.score {
                    candidates.push(s);
                    results.push(std::cmp::Reverse(s));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    fn insert(
        &mut self,
        records: &[IndexRecord],
        node: u32,
        cfg: &IndexConfig,
        m: usize,
        m0: usize,
    ) {
        let node_level = self.levels[node as usize];
        let query = &records[node as usize].vector;
        let mut ep = self.entry;

        let mut lvl = self.max_level;
        while lvl > node_level {
            ep = self.greedy(records, query, ep, lvl);
            lvl -= 1;
        }

        let top = node_level.min(self.max_level);
        for level in (0..=top).rev() {
            let found = self.search_layer(records, query, ep, cfg.ef_construction, level);
            let cap = if level == 0 { m0 } else { m };
            let chosen: Vec<u32> = found.iter().take(m).map(|s| s.id).collect();
            ep = found.first().map(|s| s.id).unwrap_or(ep);

            for &nb in &chosen {
                self.neighbors_mut(node, level).push(nb);
                let back = self.neighbors_mut(nb, level);
                back.push(node);
                if back.len() > cap {
                    // Keep the `cap` most similar neighbors of nb.
                    let nb_vec = &records[nb as usize].vector;
                    let mut scored: Vec<Scored> = back
                        .iter()
                        .map(|&x| Scored {
                            score: dot_f32(nb_vec, &records[x as usize].vector),
                            id: x,
                        })
                        .collect();
                    scored.sort_by(|a, b| b.cmp(a));
                    scored.truncate(cap);
                    *self.neighbors_mut(nb, level) = scored.into_iter().map(|s| s.id).collect();
                }
            }
        }

        if node_level > self.max_level {
            for lvl in (self.max_level + 1)..=node_level {
                self.upper[lvl as usize].insert(node, Vec::new());
            }
            self.max_level = node_level;
            self.entry = node;
        }
    }

    /// Query-time search: descend greedily to level 1, beam at level 0.
    /// Returns (record index, score) pairs, best first.
    pub(crate) fn search(
        &self,
        records: &[IndexRecord],
        query: &[f32],
        ef: usize,
    ) -> Vec<(u32, f64)> {
        if records.is_empty() {
            return Vec::new();
        }
        let mut ep = self.entry;
        let mut lvl = self.max_level;
        while lvl > 0 {
            ep = self.greedy(records, query, ep, lvl);
            lvl -= 1;
        }
        self.search_layer(records, query, ep, ef.max(1), 0)
            .into_iter()
            .map(|s| (s.id, s.score))
            .collect()
    }
}
