//! Item catalog, interaction signals and the item-similarity graph.
//!
//! Edges come from aggregated interaction counts: a pair is connected when
//! `cv + vb(u,v) + vb(v,u) - cp` is strictly greater than a threshold.
//! Co-purchases are subtracted because complementary items are bought
//! together without being substitutes for each other.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

pub const DEFAULT_EMBEDDING_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemId(String);

impl ItemId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::InvalidItem("empty item id".into()));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: ItemId,
    pub raw_price: f64,
    pub normalized_price: f64,
}

/// Items with prices and their initial embeddings (one row per item, in
/// catalog order).
#[derive(Debug, Clone)]
pub struct ItemCatalog {
    items: Vec<Item>,
    embeddings: Matrix,
    index: HashMap<ItemId, usize>,
}

impl ItemCatalog {
    /// Builds a catalog and min-max normalizes its prices.
    pub fn new(items: Vec<(ItemId, f64)>, embeddings: Matrix) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        if embeddings.rows() != items.len() {
            return Err(Error::RowCountMismatch {
                embedding_rows: embeddings.rows(),
                catalog_rows: items.len(),
            });
        }
        let mut index = HashMap::with_capacity(items.len());
        for (i, (id, price)) in items.iter().enumerate() {
            if !(price.is_finite() && *price >= 0.0) {
                return Err(Error::InvalidItem(format!("`{id}` has price {price}")));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateItem(id.to_string()));
            }
        }
        let items = items
            .into_iter()
            .map(|(id, raw_price)| Item {
                id,
                raw_price,
                normalized_price: 0.0,
            })
            .collect();
        let mut catalog = Self {
            items,
            embeddings,
            index,
        };
        catalog.normalize_prices()?;
        Ok(catalog)
    }

    /// Recomputes normalized prices from raw prices. Idempotent.
    pub fn normalize_prices(&mut self) -> Result<()> {
        let raw: Vec<f64> = self.items.iter().map(|it| it.raw_price).collect();
        let normalized = normalize_prices(&raw)?;
        for (item, p) in self.items.iter_mut().zip(normalized) {
            item.normalized_price = p;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, i: usize) -> &Item {
        &self.items[i]
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    pub fn index_of(&self, id: &ItemId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn resolve(&self, id: &ItemId) -> Result<usize> {
        self.index_of(id)
            .ok_or_else(|| Error::UnknownItem(id.to_string()))
    }

    pub fn normalized_prices(&self) -> Vec<f64> {
        self.items.iter().map(|it| it.normalized_price).collect()
    }

    pub fn raw_prices(&self) -> Vec<f64> {
        self.items.iter().map(|it| it.raw_price).collect()
    }
}

/// Min-max normalization to `[0, 1]`; a constant price vector maps to zeros.
pub fn normalize_prices(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    if let Some(bad) = raw.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::invalid("raw_price", format!("{bad} is not a nonnegative price")));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.0; raw.len()]);
    }
    let span = max - min;
    Ok(raw.iter().map(|p| (p - min) / span).collect())
}

/// Fills missing prices with draws from a normal distribution fitted to the
/// observed prices, truncated at zero by rejection.
pub fn impute_missing_prices(prices: &[Option<f64>], seed: u64) -> Result<Vec<f64>> {
    let observed: Vec<f64> = prices.iter().flatten().copied().collect();
    if observed.len() == prices.len() {
        return Ok(observed);
    }
    if observed.is_empty() {
        return Err(Error::invalid("raw_price", "no observed prices to impute from"));
    }
    let n = observed.len() as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let var = observed.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
    let normal = Normal::new(mean, var.sqrt())
        .map_err(|e| Error::invalid("raw_price", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(prices
        .iter()
        .map(|p| match p {
            Some(p) => *p,
            None => {
                for _ in 0..64 {
                    let x = normal.sample(&mut rng);
                    if x >= 0.0 {
                        return x;
                    }
                }
                0.0
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InteractionCounts {
    pub cv: u64,
    pub vb_uv: u64,
    pub vb_vu: u64,
    pub cp: u64,
}

impl InteractionCounts {
    pub fn signal(&self) -> i64 {
        self.cv as i64 + self.vb_uv as i64 + self.vb_vu as i64 - self.cp as i64
    }
}

/// Pair-aggregated interaction counts keyed by unordered item pair.
///
/// Pairs are stored with the smaller id first; the view-then-bought counts
/// are swapped on insert so that `vb_uv` always refers to the stored order.
#[derive(Debug, Clone, Default)]
pub struct InteractionStats {
    pairs: BTreeMap<(ItemId, ItemId), InteractionCounts>,
}

impl InteractionStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, u: ItemId, v: ItemId, counts: InteractionCounts) -> Result<()> {
        if u == v {
            return Err(Error::SelfPair(u.to_string()));
        }
        let (key, counts) = if u < v {
            ((u, v), counts)
        } else {
            (
                (v, u),
                InteractionCounts {
                    vb_uv: counts.vb_vu,
                    vb_vu: counts.vb_uv,
                    ..counts
                },
            )
        };
        if self.pairs.contains_key(&key) {
            return Err(Error::invalid(
                "interactions",
                format!("duplicate pair ({}, {})", key.0, key.1),
            ));
        }
        self.pairs.insert(key, counts);
        Ok(())
    }

    pub fn get(&self, u: &ItemId, v: &ItemId) -> Option<InteractionCounts> {
        if u < v {
            self.pairs.get(&(u.clone(), v.clone())).copied()
        } else {
            self.pairs.get(&(v.clone(), u.clone())).map(|c| InteractionCounts {
                vb_uv: c.vb_vu,
                vb_vu: c.vb_uv,
                ..*c
            })
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ItemId, &ItemId, &InteractionCounts)> {
        self.pairs.iter().map(|((u, v), c)| (u, v, c))
    }
}

/// `cv + vb(u,v) + vb(v,u) - cp`; unobserved pairs score 0.
pub fn similarity_signal(stats: &InteractionStats, u: &ItemId, v: &ItemId) -> Result<i64> {
    if u == v {
        return Err(Error::SelfPair(u.to_string()));
    }
    Ok(stats.get(u, v).map_or(0, |c| c.signal()))
}

/// Undirected graph over catalog indices, stored as sorted adjacency lists
/// in compressed form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemGraph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    edges: Vec<(usize, usize)>,
}

impl ItemGraph {
    /// Builds a graph from unordered pairs. Self-loops and duplicate pairs
    /// are rejected.
    pub fn from_edges(node_count: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut edges = Vec::with_capacity(pairs.len());
        for &(u, v) in pairs {
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop at node {u}")));
            }
            if u >= node_count || v >= node_count {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u}, {v}) out of range for {node_count} nodes"
                )));
            }
            edges.push((u.min(v), u.max(v)));
        }
        edges.sort_unstable();
        if let Some(w) = edges.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidGraph(format!(
                "duplicate edge ({}, {})",
                w[0].0, w[0].1
            )));
        }

        let mut degree = vec![0usize; node_count];
        for &(u, v) in &edges {
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut offsets = Vec::with_capacity(node_count + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut cursor = offsets[..node_count].to_vec();
        let mut neighbors = vec![0usize; offsets[node_count]];
        for &(u, v) in &edges {
            neighbors[cursor[u]] = v;
            cursor[u] += 1;
            neighbors[cursor[v]] = u;
            cursor[v] += 1;
        }
        for u in 0..node_count {
            neighbors[offsets[u]..offsets[u + 1]].sort_unstable();
        }
        Ok(Self {
            offsets,
            neighbors,
            edges,
        })
    }

    pub fn empty(node_count: usize) -> Self {
        Self {
            offsets: vec![0; node_count + 1],
            neighbors: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as `(u, v)` with `u < v`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.node_count()).map(|u| self.degree(u)).collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.node_count() && self.neighbors(u).binary_search(&v).is_ok()
    }

    pub fn is_complete(&self) -> bool {
        let n = self.node_count();
        self.edges.len() == n * n.saturating_sub(1) / 2
    }
}

/// Connects every catalog pair whose similarity signal is strictly above
/// `theta`. Items without edges stay in the node set.
pub fn build_edges(stats: &InteractionStats, catalog: &ItemCatalog, theta: f64) -> Result<ItemGraph> {
    let mut pairs = Vec::new();
    for (u, v, counts) in stats.iter() {
        let ui = catalog.resolve(u)?;
        let vi = catalog.resolve(v)?;
        if counts.signal() as f64 > theta {
            pairs.push((ui, vi));
        }
    }
    ItemGraph::from_edges(catalog.len(), &pairs)
}

/// Softmax over `x_i . x_j` for each candidate row, computed with the max
/// subtracted. Its argmax is the argmax of the raw dot products.
pub fn similarity_softmax(x_i: &[f64], candidates: &[&[f64]]) -> Vec<f64> {
    let logits: Vec<f64> = candidates.iter().map(|x_j| dot(x_i, x_j)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the non-cold item whose initial embedding has the largest dot
/// product with item `i`. Ties go to the lowest index.
pub fn most_similar_item(catalog: &ItemCatalog, i: usize, cold: &BTreeSet<usize>) -> Option<usize> {
    let x_i = catalog.embedding(i);
    let mut best: Option<(usize, f64)> = None;
    for j in 0..catalog.len() {
        if j == i || cold.contains(&j) {
            continue;
        }
        let s = dot(x_i, catalog.embedding(j));
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    best.map(|(j, _)| j)
}

/// Gives every cold item exactly one edge to its most similar non-cold item
/// by initial embedding. Exhaustive scan; an approximate nearest-neighbor
/// index could replace [`most_similar_item`] for very large catalogs.
pub fn attach_cold_items(
    graph: &ItemGraph,
    catalog: &ItemCatalog,
    cold: &BTreeSet<ItemId>,
) -> Result<ItemGraph> {
    if graph.node_count() != catalog.len() {
        return Err(Error::ShapeMismatch {
            context: "attach_cold_items",
            left: format!("{} graph nodes", graph.node_count()),
            right: format!("{} catalog items", catalog.len()),
        });
    }
    let mut cold_idx = BTreeSet::new();
    for id in cold {
        let i = catalog.resolve(id)?;
        if graph.degree(i) != 0 {
            return Err(Error::ColdItemNotIsolated(id.to_string(), graph.degree(i)));
        }
        cold_idx.insert(i);
    }
    if cold_idx.is_empty() {
        return Ok(graph.clone());
    }
    let mut pairs = graph.edges().to_vec();
    for &i in &cold_idx {
        let target = most_similar_item(catalog, i, &cold_idx).ok_or(Error::NoAttachmentTargets)?;
        pairs.push((i, target));
    }
    ItemGraph::from_edges(graph.node_count(), &pairs)
}

/// Disjoint train/test partition of a graph's edges.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSplit {
    pub train_edges: Vec<(usize, usize)>,
    pub test_edges: Vec<(usize, usize)>,
    pub split_seed: u64,
    pub train_fraction: f64,
}

/// Uniformly shuffles the edges with `seed` and keeps
/// `round(train_fraction * |E|)` of them for training, clamped so that both
/// sides are non-empty.
pub fn split_edges(graph: &ItemGraph, train_fraction: f64, seed: u64) -> Result<EdgeSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction", format!("{train_fraction} is not in (0, 1)")));
    }
    let m = graph.edge_count();
    if m < 2 {
        return Err(Error::TooFewEdges(m));
    }
    let n_train = ((train_fraction * m as f64).round() as usize).clamp(1, m - 1);
    let mut edges = graph.edges().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);
    let mut test_edges = edges.split_off(n_train);
    let mut train_edges = edges;
    train_edges.sort_unstable();
    test_edges.sort_unstable();
    Ok(EdgeSplit {
        train_edges,
        test_edges,
        split_seed: seed,
        train_fraction,
    })
}
