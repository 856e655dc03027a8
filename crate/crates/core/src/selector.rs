//! Representational filtering over a cosine kNN graph.
//!
//! `V(x)` holds the `k` samples most similar to `x`; `E(u)` is the set of
//! samples that list `u` among their neighbors. Greedy selection repeatedly
//! takes the unselected `u` maximizing
//!
//! ```text
//! score(u) = sum over x in E(u) of rho^-|V(x) ∩ L|
//! ```
//!
//! where `L` is the set picked so far. Large `E(u)` rewards
//! representativeness; the `rho` discount penalizes regions that already
//! have a selected neighbor.
//!
//! The graph is exact, O(n^2) in the pool size. An approximate-NN index could
//! replace [`build_graph`] behind the same [`NeighborGraph`] type for larger
//! pools.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{FesError, Result};
use crate::exec::Execution;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub k: usize,
    pub rho: f64,
    pub budget_fraction: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            k: 10,
            rho: 2.0,
            budget_fraction: 0.05,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(FesError::InvalidConfig(
                "selector.k must be at least 1".into(),
            ));
        }
        if !(self.rho > 1.0) {
            return Err(FesError::InvalidConfig(format!(
                "selector.rho must exceed 1 (got {})",
                self.rho
            )));
        }
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(FesError::InvalidConfig(format!(
                "selector.budget_fraction must be in (0, 1] (got {})",
                self.budget_fraction
            )));
        }
        Ok(())
    }

    pub fn budget(&self, pool: usize) -> usize {
        budget(self.budget_fraction, pool)
    }
}

fn budget(fraction: f64, pool: usize) -> usize {
    ((fraction * pool as f64).ceil() as usize).min(pool)
}

/// Exact cosine kNN graph. Nodes are positions into `ids`, which are kept in
/// ascending sample-id order so position ties and id ties agree.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub k: usize,
    pub ids: Vec<usize>,
    /// `neighbors[x]`: positions of `V(x)`, most similar first.
    pub neighbors: Vec<Vec<usize>>,
    /// `reverse[u]`: positions of `E(u)`, ascending.
    pub reverse: Vec<Vec<usize>>,
    /// Zero-norm inputs, treated as similarity -1 to everything.
    pub zero_norm: usize,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn neighbor_ids(&self, x: usize) -> Vec<usize> {
        self.neighbors[x].iter().map(|&p| self.ids[p]).collect()
    }
}

fn cosine(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

pub fn build_graph(
    ids: &[usize],
    embeddings: &[&[f64]],
    k: usize,
    exec: Execution,
) -> Result<NeighborGraph> {
    if ids.len() != embeddings.len() {
        return Err(FesError::InvalidConfig(
            "ids and embeddings differ in length".into(),
        ));
    }
    if let Some(first) = embeddings.first() {
        if let Some(bad) = embeddings.iter().find(|e| e.len() != first.len()) {
            return Err(FesError::DimensionMismatch {
                expected: first.len(),
                actual: bad.len(),
            });
        }
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| ids[i]);
    let sorted_ids: Vec<usize> = order.iter().map(|&i| ids[i]).collect();
    if sorted_ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(FesError::InvalidConfig(
            "duplicate sample id in selector pool".into(),
        ));
    }
    let vecs: Vec<&[f64]> = order.iter().map(|&i| embeddings[i]).collect();
    let norms: Vec<f64> = vecs
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let zero_norm = norms.iter().filter(|&&n| n == 0.0).count();
    if zero_norm > 0 {
        log::warn!("{zero_norm} zero-norm embeddings in selector pool");
    }
    let n = vecs.len();
    let take = k.min(n.saturating_sub(1));
    let neighbors = exec.map_range(n, |x| {
        let mut cands: Vec<(f64, usize)> = (0..n)
            .filter(|&y| y != x)
            .map(|y| (cosine(vecs[x], norms[x], vecs[y], norms[y]), y))
            .collect();
        let by_sim = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if take < cands.len() {
            cands.select_nth_unstable_by(take, by_sim);
            cands.truncate(take);
        }
        cands.sort_by(by_sim);
        cands.into_iter().map(|(_, y)| y).collect::<Vec<_>>()
    });
    let mut reverse = vec![Vec::new(); n];
    for (x, vs) in neighbors.iter().enumerate() {
        for &u in vs {
            reverse[u].push(x);
        }
    }
    Ok(NeighborGraph {
        k,
        ids: sorted_ids,
        neighbors,
        reverse,
        zero_norm,
    })
}

/// Greedy pick order with each pick's score at the time it was taken.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Greedy representativeness/diversity selection of
/// `ceil(budget_fraction * |pool|)` samples.
///
/// Discount counts `|V(x) ∩ L|` are kept incrementally; after each pick only
/// the scores of nodes sharing a reverse edge with the pick are recomputed.
pub fn select(graph: &NeighborGraph, cfg: &SelectorConfig) -> Selection {
    let n = graph.len();
    let want = cfg.budget(n);
    let rho = cfg.rho;
    let mut hits = vec![0i32; n];
    let mut chosen = vec![false; n];
    let score_of = |u: usize, hits: &[i32]| -> f64 {
        graph.reverse[u].iter().map(|&x| rho.powi(-hits[x])).sum()
    };
    let mut scores: Vec<f64> = (0..n).map(|u| score_of(u, &hits)).collect();
    let mut dirty = vec![false; n];
    let mut touched = Vec::new();
    let mut out = Selection::default();
    for _ in 0..want {
        let mut best: Option<usize> = None;
        for u in (0..n).filter(|&u| !chosen[u]) {
            if best.is_none_or(|b| scores[u] > scores[b]) {
                best = Some(u);
            }
        }
        let Some(s) = best else { break };
        chosen[s] = true;
        out.ids.push(graph.ids[s]);
        out.scores.push(scores[s]);
        for &x in &graph.reverse[s] {
            hits[x] += 1;
            for &u in &graph.neighbors[x] {
                if !dirty[u] {
                    dirty[u] = true;
                    touched.push(u);
                }
            }
        }
        for u in touched.drain(..) {
            dirty[u] = false;
            scores[u] = score_of(u, &hits);
        }
    }
    out
}

/// Build the graph over `pool` and run [`select`]; returns the picked ids.
pub fn select_pool(
    pool: &[usize],
    embedding: impl Fn(usize) -> Vec<f64>,
    cfg: &SelectorConfig,
    exec: Execution,
) -> Result<Selection> {
    let vecs: Vec<Vec<f64>> = pool.iter().map(|&id| embedding(id)).collect();
    let refs: Vec<&[f64]> = vecs.iter().map(Vec::as_slice).collect();
    let graph = build_graph(pool, &refs, cfg.k, exec)?;
    Ok(select(&graph, cfg))
}

/// Uniform sample of `ceil(fraction * |pool|)` ids without replacement.
pub fn random_select(pool: &[usize], fraction: f64, rng: &mut Rng) -> Vec<usize> {
    let want = budget(fraction, pool.len());
    let mut ids = pool.to_vec();
    let (picked, _) = ids.partial_shuffle(rng, want);
    picked.to_vec()
}
