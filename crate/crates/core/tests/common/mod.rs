//! Independent reference computations shared by the integration tests.
//!
//! Every oracle here is written directly from the formulas, with dense
//! matrices, plain loops and no numerical tricks, so that it shares no code
//! path with the library.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::{BTreeSet, HashMap};

use gmvo::encoder::ModelParams;
use gmvo::graph::{ItemCatalog, ItemGraph, ItemId};
use gmvo::matrix::Matrix;
use gmvo::objective::{EdgeBatch, Lambda, LossKind};
use gmvo::training::backward;
use gmvo::ModelKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn id(i: usize) -> ItemId {
    ItemId::new(format!("n{i:04}")).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Erdős–Rényi edge list over `n` nodes.
pub fn random_edges(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    edges
}

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> ItemGraph {
    ItemGraph::from_edges(n, &random_edges(rng, n, p)).unwrap()
}

pub fn catalog_with(x: Matrix, prices: &[f64]) -> ItemCatalog {
    let items = prices.iter().enumerate().map(|(i, &p)| (id(i), p)).collect();
    ItemCatalog::new(items, x).unwrap()
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn dense_adjacency(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for &(u, v) in edges {
        a[u][v] = 1.0;
        a[v][u] = 1.0;
    }
    a
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `ReLU(D^-1/2 (A + I) D^-1/2 H W^T)` with `D` the degree matrix of
/// `A + I`, computed densely.
pub fn dense_gcn_layer(n: usize, edges: &[(usize, usize)], h: &[Vec<f64>], w: &Matrix) -> Vec<Vec<f64>> {
    let mut a = dense_adjacency(n, edges);
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    let mut norm_a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            norm_a[i][j] = a[i][j] / (deg[i].sqrt() * deg[j].sqrt());
        }
    }
    let d_in = w.cols();
    let mut agg = vec![vec![0.0; d_in]; n];
    for i in 0..n {
        for j in 0..n {
            for c in 0..d_in {
                agg[i][c] += norm_a[i][j] * h[j][c];
            }
        }
    }
    agg.iter()
        .map(|row| {
            (0..w.rows())
                .map(|r| relu((0..d_in).map(|c| w[(r, c)] * row[c]).sum()))
                .collect()
        })
        .collect()
}

/// Dense attention layer: materializes the full `n x n` coefficient matrix
/// (zero outside `N(u) + u`) with plain exponentials, then aggregates.
pub fn dense_gat_layer(
    n: usize,
    edges: &[(usize, usize)],
    h: &[Vec<f64>],
    w: &Matrix,
    a: &[f64],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d_out = w.rows();
    let g: Vec<Vec<f64>> = h
        .iter()
        .map(|row| (0..d_out).map(|r| (0..w.cols()).map(|c| w[(r, c)] * row[c]).sum()).collect())
        .collect();
    let mut adj = dense_adjacency(n, edges);
    for (i, row) in adj.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut alpha = vec![vec![0.0; n]; n];
    for u in 0..n {
        let mut total = 0.0;
        for v in 0..n {
            if adj[u][v] == 1.0 {
                let mut e = 0.0;
                for k in 0..d_out {
                    e += a[k] * g[u][k] + a[d_out + k] * g[v][k];
                }
                alpha[u][v] = e.exp();
                total += alpha[u][v];
            }
        }
        for v in 0..n {
            alpha[u][v] /= total;
        }
    }
    let out = (0..n)
        .map(|u| {
            (0..d_out)
                .map(|k| relu((0..n).map(|v| alpha[u][v] * g[v][k]).sum()))
                .collect()
        })
        .collect();
    (out, alpha)
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        for (c, x) in row.iter().enumerate() {
            worst = worst.max((x - b[(r, c)]).abs());
        }
    }
    worst
}

/// NDCG@k from scratch: DCG over the ranked list, ideal DCG as the best
/// DCG over every ordering of the labeled candidates (exhaustive for small
/// pools).
pub fn ndcg_oracle(ranked_rels: &[u8], all_rels: &[u8], k: usize) -> f64 {
    let dcg = |rels: &[u8]| -> f64 {
        let mut s = 0.0;
        for i in 0..rels.len().min(k) {
            s += f64::from(rels[i]) / ((i + 1) as f64 + 1.0).log2();
        }
        s
    };
    let mut best: f64 = 0.0;
    let mut perm = all_rels.to_vec();
    permutations(&mut perm, 0, &mut |p| best = best.max(dcg(p)));
    if best == 0.0 {
        0.0
    } else {
        dcg(ranked_rels) / best
    }
}

fn permutations(items: &mut Vec<u8>, start: usize, visit: &mut dyn FnMut(&[u8])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permutations(items, start + 1, visit);
        items.swap(start, i);
    }
}

/// EGMV for one anchor as a triple loop over buckets, top-k items and the
/// pool.
pub fn egmv_oracle(
    top: &[usize],
    pool: &[usize],
    counts: &[Vec<u64>],
    prices: &[f64],
    k: usize,
) -> f64 {
    let buckets = counts.first().map_or(0, Vec::len);
    let mut total = 0.0;
    for t in 0..buckets {
        for &item in top.iter().take(k) {
            let mut denom = 0u64;
            for &j in pool {
                denom += counts[j][t];
            }
            if denom > 0 {
                total += counts[item][t] as f64 / denom as f64 * prices[item];
            }
        }
    }
    total
}

/// Index of the largest dot product among the non-cold rows other than
/// `i`, lowest index on ties, by a plain scan.
pub fn nearest_by_dot(x: &[Vec<f64>], i: usize, cold: &BTreeSet<usize>) -> Option<usize> {
    let mut best = None;
    let mut best_score = f64::NEG_INFINITY;
    for (j, row) in x.iter().enumerate() {
        if j == i || cold.contains(&j) {
            continue;
        }
        let s: f64 = x[i].iter().zip(row).map(|(a, b)| a * b).sum();
        if best.is_none() || s > best_score {
            best = Some(j);
            best_score = s;
        }
    }
    best
}

/// Plain cosine ranking: score descending, id ascending.
pub fn cosine_order(z: &[Vec<f64>], anchor: usize, candidates: &[usize]) -> Vec<usize> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(usize, f64)> = candidates
        .iter()
        .map(|&c| {
            let d: f64 = z[anchor].iter().zip(&z[c]).map(|(a, b)| a * b).sum();
            let n = norm(&z[anchor]) * norm(&z[c]);
            (c, if n == 0.0 { 0.0 } else { d / n })
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(id(a.0).cmp(&id(b.0))));
    scored.into_iter().map(|(c, _)| c).collect()
}

/// One random gradient-check problem.
pub struct GradInstance {
    pub graph: ItemGraph,
    pub x: Matrix,
    pub params: ModelParams,
    pub batch: EdgeBatch,
    pub prices: Vec<f64>,
    pub lambda: Lambda,
    pub loss: LossKind,
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-6;

impl GradInstance {
    pub fn random(rng: &mut ChaCha8Rng, kind: ModelKind, loss: LossKind, lambda: f64) -> Option<Self> {
        let n = rng.random_range(4..=20);
        let hops = rng.random_range(1..=2);
        let mut dims = vec![rng.random_range(1..=8)];
        for _ in 0..hops {
            dims.push(rng.random_range(1..=8));
        }
        let edges = random_edges(rng, n, 0.3);
        let graph = ItemGraph::from_edges(n, &edges).ok()?;
        if graph.edge_count() == 0 || graph.is_complete() {
            return None;
        }
        let x = random_matrix(rng, n, dims[0], 1.0);
        let params = ModelParams::init(kind, &dims, rng.random()).ok()?;
        let positives = graph.edges().to_vec();
        let batch = EdgeBatch::sample(positives, &graph, rng.random()).ok()?;
        let prices = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Some(GradInstance {
            graph,
            x,
            params,
            batch,
            prices,
            lambda: Lambda::new(lambda).unwrap(),
            loss,
        })
    }

    pub fn loss_and_grad(&self, params: &ModelParams) -> (f64, ModelParams) {
        backward(
            &self.graph,
            &self.x,
            params,
            &self.batch,
            &self.prices,
            self.lambda,
            self.loss,
            gmvo::objective::DEFAULT_MARGIN,
        )
        .unwrap()
    }

    fn loss_at(&self, tensor: usize, index: usize, value: f64) -> f64 {
        let mut p = self.params.clone();
        p.tensors_mut()[tensor][index] = value;
        self.loss_and_grad(&p).0
    }
}

pub enum GradCheck {
    Pass { coordinates: usize },
    /// A ReLU, hinge or clamp boundary lies within the difference stencil,
    /// so central differences do not estimate the derivative.
    NonSmooth,
    Fail(String),
}

/// Compares every analytic coordinate to a central difference.
pub fn check_gradient(inst: &GradInstance) -> GradCheck {
    let (_, grads) = inst.loss_and_grad(&inst.params);
    let mut coordinates = 0;
    let mut failure = None;
    for (t, (values, analytic)) in inst.params.tensors().iter().zip(grads.tensors()).enumerate() {
        for (i, (&x, &g)) in values.iter().zip(analytic).enumerate() {
            let f0 = inst.loss_at(t, i, x);
            let fp = inst.loss_at(t, i, x + FD_STEP);
            let fm = inst.loss_at(t, i, x - FD_STEP);
            let central = (fp - fm) / (2.0 * FD_STEP);
            let forward = (fp - f0) / FD_STEP;
            let backward = (f0 - fm) / FD_STEP;
            if (forward - backward).abs() > 1e-3 * (1.0 + central.abs()) {
                return GradCheck::NonSmooth;
            }
            let err = (g - central).abs();
            let scale = g.abs().max(central.abs());
            if err > FD_ABS_FLOOR && err > FD_REL_TOL * scale && failure.is_none() {
                failure = Some(format!(
                    "tensor {t} index {i}: analytic {g:.9e} vs numeric {central:.9e}"
                ));
            }
            coordinates += 1;
        }
    }
    match failure {
        Some(msg) => GradCheck::Fail(msg),
        None => GradCheck::Pass { coordinates },
    }
}

/// Per-item purchase counts as a dense `items x buckets` table.
pub fn dense_counts(rng: &mut ChaCha8Rng, items: usize, buckets: usize, zero_prob: f64) -> Vec<Vec<u64>> {
    (0..items)
        .map(|_| {
            (0..buckets)
                .map(|_| if rng.random_bool(zero_prob) { 0 } else { rng.random_range(1..20) })
                .collect()
        })
        .collect()
}

pub fn price_map(prices: &[f64]) -> HashMap<ItemId, f64> {
    prices.iter().enumerate().map(|(i, &p)| (id(i), p)).collect()
}
