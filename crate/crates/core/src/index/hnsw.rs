//! Hierarchical small-world graph for maximum inner-product search.
//!
//! Vectors are lifted by one coordinate, `sqrt(R^2 - |x|^2)` with `R` the
//! largest norm, so that Euclidean order on the lifted vectors (query lifted
//! with 0) equals inner-product order on the originals. The graph itself is
//! a standard HNSW over the lifted vectors.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MvrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnParams {
    /// Links per node on upper layers (twice this on layer 0).
    pub m: usize,
    pub ef_construction: usize,
    /// Default search beam; raised to the candidate count when smaller.
    pub ef_search: usize,
    /// Raw entries fetched per requested document per viewer.
    pub overfetch: usize,
    pub seed: u64,
}

impl Default for AnnParams {
    fn default() -> Self {
        AnnParams {
            m: 16,
            ef_construction: 128,
            ef_search: 64,
            overfetch: 2,
            seed: 0,
        }
    }
}

impl AnnParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(MvrError::config("ann m must be at least 2"));
        }
        if self.ef_construction == 0 || self.ef_search == 0 || self.overfetch == 0 {
            return Err(MvrError::config("ann ef_construction, ef_search and overfetch must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Near {
    dist: f64,
    id: u32,
}

impl Eq for Near {}

impl Ord for Near {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for Near {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
pub struct HnswGraph {
    params: AnnParams,
    dim: usize,
    /// Lifted vectors, `dim + 1` per node.
    lifted: Vec<f64>,
    /// `links[node][layer]`.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    top_layer: usize,
}

impl HnswGraph {
    /// Builds the graph over `vectors` (`n * dim`, row-major), inserting rows
    /// in order. Deterministic in `params.seed`.
    pub fn build(vectors: &[f32], dim: usize, params: AnnParams) -> Result<Self> {
        params.validate()?;
        if dim == 0 || !vectors.len().is_multiple_of(dim) {
            return Err(MvrError::invalid("vector buffer is not a whole number of rows"));
        }
        let n = vectors.len() / dim;
        let max_sq = vectors
            .chunks_exact(dim)
            .map(|r| r.iter().map(|&x| x as f64 * x as f64).sum::<f64>())
            .fold(0.0, f64::max);
        let mut lifted = Vec::with_capacity(n * (dim + 1));
        for r in vectors.chunks_exact(dim) {
            let sq: f64 = r.iter().map(|&x| x as f64 * x as f64).sum();
            lifted.extend(r.iter().map(|&x| x as f64));
            lifted.push((max_sq - sq).max(0.0).sqrt());
        }
        let mut g = HnswGraph {
            params,
            dim,
            lifted,
            links: Vec::with_capacity(n),
            entry: None,
            top_layer: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let ml = 1.0 / (params.m as f64).ln();
        for id in 0..n as u32 {
            let u: f64 = rng.random::<f64>();
            let level = (-(1.0 - u).ln() * ml).floor() as usize;
            g.insert(id, level);
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn params(&self) -> &AnnParams {
        &self.params
    }

    fn row(&self, id: u32) -> &[f64] {
        let w = self.dim + 1;
        &self.lifted[id as usize * w..(id as usize + 1) * w]
    }

    fn dist_to(&self, q: &[f64], id: u32) -> f64 {
        self.row(id)
            .iter()
            .zip(q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    fn dist_between(&self, a: u32, b: u32) -> f64 {
        let rb = self.row(b);
        self.dist_to(rb, a)
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    fn insert(&mut self, id: u32, level: usize) {
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(mut ep) = self.entry else {
            self.entry = Some(id);
            self.top_layer = level;
            return;
        };
        let q: Vec<f64> = self.row(id).to_vec();
        for layer in (level + 1..=self.top_layer).rev() {
            ep = self.greedy(&q, ep, layer);
        }
        let mut eps = vec![ep];
        for layer in (0..=level.min(self.top_layer)).rev() {
            let found = self.search_layer(&q, &eps, self.params.ef_construction, layer);
            let chosen = self.select(&found, self.params.m);
            for &nb in &chosen {
                self.links[id as usize][layer].push(nb);
                self.links[nb as usize][layer].push(id);
                if self.links[nb as usize][layer].len() > self.max_links(layer) {
                    self.prune(nb, layer);
                }
            }
            eps = found.iter().map(|n| n.id).collect();
        }
        if level > self.top_layer {
            self.top_layer = level;
            self.entry = Some(id);
        }
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every neighbour already kept; fill up with the nearest rejects.
    fn select(&self, sorted: &[Near], m: usize) -> Vec<u32> {
        let mut kept: Vec<u32> = Vec::with_capacity(m);
        let mut rejected = Vec::new();
        for c in sorted {
            if kept.len() >= m {
                break;
            }
            if kept.iter().all(|&k| self.dist_between(c.id, k) > c.dist) {
                kept.push(c.id);
            } else {
                rejected.push(c.id);
            }
        }
        for r in rejected {
            if kept.len() >= m {
                break;
            }
            kept.push(r);
        }
        kept
    }

    fn prune(&mut self, node: u32, layer: usize) {
        let mut cands: Vec<Near> = self.links[node as usize][layer]
            .iter()
            .map(|&nb| Near {
                dist: self.dist_between(node, nb),
                id: nb,
            })
            .collect();
        cands.sort();
        cands.dedup_by_key(|n| n.id);
        let kept = self.select(&cands, self.max_links(layer));
        self.links[node as usize][layer] = kept;
    }

    fn greedy(&self, q: &[f64], mut ep: u32, layer: usize) -> u32 {
        let mut best = self.dist_to(q, ep);
        loop {
            let mut moved = false;
            for &nb in &self.links[ep as usize][layer] {
                let d = self.dist_to(q, nb);
                if d < best || (d == best && nb < ep) {
                    best = d;
                    ep = nb;
                    moved = true;
                }
            }
            if !moved {
                return ep;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` nodes sorted nearest first.
    fn search_layer(&self, q: &[f64], entries: &[u32], ef: usize, layer: usize) -> Vec<Near> {
        let mut visited = vec![false; self.links.len()];
        let mut frontier: BinaryHeap<Reverse<Near>> = BinaryHeap::new();
        let mut best: BinaryHeap<Near> = BinaryHeap::new();
        for &e in entries {
            if !visited[e as usize] {
                visited[e as usize] = true;
                let n = Near {
                    dist: self.dist_to(q, e),
                    id: e,
                };
                frontier.push(Reverse(n));
                best.push(n);
            }
        }
        while best.len() > ef {
            best.pop();
        }
        while let Some(Reverse(c)) = frontier.pop() {
            if best.len() >= ef && c.dist > best.peek().map_or(f64::INFINITY, |w| w.dist) {
                break;
            }
            for &nb in &self.links[c.id as usize][layer] {
                if visited[nb as usize] {
                    continue;
                }
                visited[nb as usize] = true;
                let n = Near {
                    dist: self.dist_to(q, nb),
                    id: nb,
                };
                if best.len() < ef || n < *best.peek().expect("non-empty") {
                    frontier.push(Reverse(n));
                    best.push(n);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    /// Ids of (approximately) the `n` rows with the largest inner product with `query`.
    pub fn search(&self, query: &[f64], n: usize, ef: usize) -> Vec<u32> {
        let Some(mut ep) = self.entry else {
            return Vec::new();
        };
        let mut q: Vec<f64> = query.to_vec();
        q.push(0.0);
        for layer in (1..=self.top_layer).rev() {
            ep = self.greedy(&q, ep, layer);
        }
        let found = self.search_layer(&q, &[ep], ef.max(n), 0);
        found.into_iter().take(n).map(|x| x.id).collect()
    }
}
