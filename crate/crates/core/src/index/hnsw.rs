//! Layered navigable small-world graph over unit vectors with `1 − dot` distance.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnswParams {
    /// Links per node on upper layers; layer 0 allows `2m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self { m: 16, ef_construction: 200, ef_search: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Scored {
    pub dist: f64,
    pub id: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scored {}
impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

/// Row-major unit vectors.
#[derive(Clone, Copy)]
pub(crate) struct Points<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl<'a> Points<'a> {
    pub fn row(&self, i: u32) -> &'a [f64] {
        let s = i as usize * self.dim;
        &self.data[s..s + self.dim]
    }

    pub fn dist_to(&self, q: &[f64], i: u32) -> f64 {
        1.0 - dot(q, self.row(i))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Visited {
    stamp: Vec<u32>,
    generation: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self { stamp: vec![0; n], generation: 0 }
    }

    fn reset(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.generation = 1;
        }
    }

    /// True the first time `i` is seen since the last reset.
    fn insert(&mut self, i: u32) -> bool {
        let s = &mut self.stamp[i as usize];
        if *s == self.generation {
            false
        } else {
            *s = self.generation;
            true
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct HnswGraph {
    /// `links[node][layer]`, for layers `0..=level(node)`.
    pub links: Vec<Vec<Vec<u32>>>,
    pub entry: u32,
    pub max_level: usize,
}

impl HnswGraph {
    pub fn build(points: Points<'_>, count: usize, params: &HnswParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let ml = 1.0 / (params.m.max(2) as f64).ln();
        let mut g = HnswGraph { links: Vec::with_capacity(count), entry: 0, max_level: 0 };
        let mut visited = Visited::new(count);
        for i in 0..count as u32 {
            let u: f64 = 1.0 - rng.random::<f64>();
            let level = ((-u.ln() * ml).floor() as usize).min(MAX_LEVEL);
            g.insert(points, i, level, params, &mut visited);
        }
        g
    }

    fn insert(&mut self, points: Points<'_>, i: u32, level: usize, params: &HnswParams, visited: &mut Visited) {
        self.links.push(vec![Vec::new(); level + 1]);
        if i == 0 {
            self.entry = 0;
            self.max_level = level;
            return;
        }
        let q = points.row(i);
        let mut ep = vec![Scored { dist: points.dist_to(q, self.entry), id: self.entry }];
        for layer in (level + 1..=self.max_level).rev() {
            ep = vec![self.greedy(points, q, ep[0], layer)];
        }
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(points, q, &ep, params.ef_construction, layer, visited);
            let chosen = select_heuristic(points, &found, params.m);
            self.links[i as usize][layer] = chosen.iter().map(|s| s.id).collect();
            let cap = if layer == 0 { 2 * params.m } else { params.m };
            for s in &chosen {
                let n = s.id;
                self.links[n as usize][layer].push(i);
                if self.links[n as usize][layer].len() > cap {
                    let base = points.row(n);
                    let mut cands: Vec<Scored> = self.links[n as usize][layer]
                        .iter()
                        .map(|&c| Scored { dist: points.dist_to(base, c), id: c })
                        .collect();
                    cands.sort();
                    self.links[n as usize][layer] = select_heuristic(points, &cands, cap).iter().map(|s| s.id).collect();
                }
            }
            ep = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = i;
        }
    }

    fn greedy(&self, points: Points<'_>, q: &[f64], start: Scored, layer: usize) -> Scored {
        let mut best = start;
        loop {
            let mut improved = false;
            for &n in &self.links[best.id as usize][layer] {
                let s = Scored { dist: points.dist_to(q, n), id: n };
                if s < best {
                    best = s;
                    improved = true;
                }
            }
            if !improved {
                return best;
            }
        }
    }

    /// Beam search on one layer; result sorted ascending.
    fn search_layer(&self, points: Points<'_>, q: &[f64], entry: &[Scored], ef: usize, layer: usize, visited: &mut Visited) -> Vec<Scored> {
        visited.reset();
        let mut candidates: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        let mut results: BinaryHeap<Scored> = BinaryHeap::new();
        for &e in entry {
            if visited.insert(e.id) {
                candidates.push(Reverse(e));
                results.push(e);
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(Reverse(c)) = candidates.pop() {
            if results.len() >= ef && c > *results.peek().expect("nonempty") {
                break;
            }
            for &n in &self.links[c.id as usize][layer] {
                if !visited.insert(n) {
                    continue;
                }
                let s = Scored { dist: points.dist_to(q, n), id: n };
                if results.len() < ef || s < *results.peek().expect("nonempty") {
                    candidates.push(Reverse(s));
                    results.push(s);
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        results.into_sorted_vec()
    }

    /// Top `k` by descent then a layer-0 beam of width `max(ef, k)`.
    pub fn search(&self, points: Points<'_>, q: &[f64], k: usize, ef: usize) -> Vec<Scored> {
        let mut visited = Visited::new(self.links.len());
        let mut ep = Scored { dist: points.dist_to(q, self.entry), id: self.entry };
        for layer in (1..=self.max_level).rev() {
            ep = self.greedy(points, q, ep, layer);
        }
        let mut found = self.search_layer(points, q, &[ep], ef.max(k), 0, &mut visited);
        found.truncate(k);
        found
    }
}

/// Keeps a candidate only if it is closer to the base than to every kept one.
/// `cands` must be sorted ascending by distance to the base.
fn select_heuristic(points: Points<'_>, cands: &[Scored], m: usize) -> Vec<Scored> {
    let mut kept: Vec<Scored> = Vec::with_capacity(m);
    for &c in cands {
        if kept.len() >= m {
            break;
        }
        let row = points.row(c.id);
        if kept.iter().all(|k| points.dist_to(row, k.id) > c.dist) {
            kept.push(c);
        }
    }
    kept
}
