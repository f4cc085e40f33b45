//! GCN and GAT encoders.
//!
//! Both encoders run `K` rounds of message passing over the item graph.
//! Every node aggregates over its neighbors plus itself; a node without
//! neighbors therefore reduces to `ReLU(W h)` in both models. Per-node sums
//! visit the sorted neighbor list first and the node itself last.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ItemGraph;
use crate::matrix::{dot, relu, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gcn,
    Gat,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gcn => "gcn",
            ModelKind::Gat => "gat",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(ModelKind::Gcn),
            "gat" => Ok(ModelKind::Gat),
            other => Err(Error::UnknownModelKind(other.to_string())),
        }
    }
}

/// One weight matrix per hop, stored `d_out x d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub weights: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    pub weight: Matrix,
    /// Scores `[W h_u ; W h_v]`, so its length is `2 * d_out`.
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatParams {
    pub layers: Vec<GatLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Gcn(GcnParams),
    Gat(GatParams),
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    (0..len)
        .map(|_| f64::from(rng.random_range(-bound..=bound)))
        .collect()
}

impl ModelParams {
    /// Seeded Glorot-uniform initialization. `dims = [d_0, d_1, ..., d_K]`.
    pub fn init(kind: ModelKind, dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("dims", "at least one layer is required"));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("dims", "dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = |d_in: usize, d_out: usize, rng: &mut ChaCha8Rng| {
            Matrix::from_vec(d_out, d_in, glorot(rng, d_in, d_out, d_in * d_out))
                .expect("shape is consistent")
        };
        Ok(match kind {
            ModelKind::Gcn => ModelParams::Gcn(GcnParams {
                weights: dims
                    .windows(2)
                    .map(|w| weight(w[0], w[1], &mut rng))
                    .collect(),
            }),
            ModelKind::Gat => ModelParams::Gat(GatParams {
                layers: dims
                    .windows(2)
                    .map(|w| {
                        let weight = weight(w[0], w[1], &mut rng);
                        let attention = glorot(&mut rng, 2 * w[1], 1, 2 * w[1]);
                        GatLayer { weight, attention }
                    })
                    .collect(),
            }),
        })
    }

    /// Assembles parameters from flat tensors in declaration order (per hop:
    /// weight, then attention for GAT).
    pub fn from_tensors(kind: ModelKind, dims: &[usize], tensors: Vec<Vec<f64>>) -> Result<Self> {
        let mut params = Self::init(kind, dims, 0)?;
        let expected = params.tensors().len();
        if tensors.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "parameter tensors",
                left: format!("{expected} tensors"),
                right: format!("{} tensors", tensors.len()),
            });
        }
        for (dst, src) in params.tensors_mut().into_iter().zip(tensors) {
            if dst.len() != src.len() {
                return Err(Error::ShapeMismatch {
                    context: "parameter tensor",
                    left: format!("{} values", dst.len()),
                    right: format!("{} values", src.len()),
                });
            }
            dst.copy_from_slice(&src);
        }
        Ok(params)
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Gcn(_) => ModelKind::Gcn,
            ModelParams::Gat(_) => ModelKind::Gat,
        }
    }

    pub fn hops(&self) -> usize {
        match self {
            ModelParams::Gcn(p) => p.weights.len(),
            ModelParams::Gat(p) => p.layers.len(),
        }
    }

    pub fn weights(&self) -> Vec<&Matrix> {
        match self {
            ModelParams::Gcn(p) => p.weights.iter().collect(),
            ModelParams::Gat(p) => p.layers.iter().map(|l| &l.weight).collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let weights = self.weights();
        let mut dims = vec![weights[0].cols()];
        dims.extend(weights.iter().map(|w| w.rows()));
        dims
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            ModelParams::Gcn(p) => p.weights.iter().map(Matrix::as_slice).collect(),
            ModelParams::Gat(p) => p
                .layers
                .iter()
                .flat_map(|l| [l.weight.as_slice(), l.attention.as_slice()])
                .collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            ModelParams::Gcn(p) => p.weights.iter_mut().map(Matrix::as_mut_slice).collect(),
            ModelParams::Gat(p) => p
                .layers
                .iter_mut()
                .flat_map(|l| [l.weight.as_mut_slice(), l.attention.as_mut_slice()])
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = f64::from(*x as f32);
            }
        }
    }
}

/// Final node embeddings, one row per catalog item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Matrix);

impl EmbeddingMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::invalid("embeddings", "non-finite value"));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

fn check_nodes(graph: &ItemGraph, h: &Matrix) -> Result<()> {
    if h.rows() != graph.node_count() {
        return Err(Error::ShapeMismatch {
            context: "node features",
            left: format!("{} graph nodes", graph.node_count()),
            right: h.shape_str(),
        });
    }
    Ok(())
}

fn check_weight(h: &Matrix, w: &Matrix) -> Result<()> {
    if h.cols() != w.cols() {
        return Err(Error::ShapeMismatch {
            context: "layer input",
            left: h.shape_str(),
            right: w.shape_str(),
        });
    }
    Ok(())
}

/// Symmetric normalized aggregation with self-loops:
/// `out_u = sum_{v in N(u) + u} h_v / sqrt((|N(u)|+1)(|N(v)|+1))`.
pub(crate) fn gcn_aggregate(graph: &ItemGraph, h: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(h.rows(), h.cols());
    for u in 0..graph.node_count() {
        let du = (graph.degree(u) + 1) as f64;
        let dst = out.row_mut(u);
        for &v in graph.neighbors(u).iter().chain(std::iter::once(&u)) {
            let c = 1.0 / (du * (graph.degree(v) + 1) as f64).sqrt();
            for (d, s) in dst.iter_mut().zip(h.row(v)) {
                *d += c * s;
            }
        }
    }
    out
}

pub(crate) struct GcnCache {
    pub agg: Matrix,
    pub pre: Matrix,
}

pub(crate) fn gcn_forward(graph: &ItemGraph, h_prev: &Matrix, w: &Matrix) -> Result<(Matrix, GcnCache)> {
    check_nodes(graph, h_prev)?;
    check_weight(h_prev, w)?;
    let agg = gcn_aggregate(graph, h_prev);
    let pre = agg.mul_transposed(w)?;
    let out = pre.map(relu);
    Ok((out, GcnCache { agg, pre }))
}

/// Returns `(dW, dH_prev)` given the gradient of the layer output.
pub(crate) fn gcn_backward(
    graph: &ItemGraph,
    cache: &GcnCache,
    w: &Matrix,
    d_out: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let mut d_pre = d_out.clone();
    for (d, p) in d_pre.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
        if *p <= 0.0 {
            *d = 0.0;
        }
    }
    let d_w = d_pre.transpose_mul(&cache.agg)?;
    let d_agg = d_pre.matmul(w)?;
    // the normalized adjacency is symmetric
    let d_h = gcn_aggregate(graph, &d_agg);
    Ok((d_w, d_h))
}

/// One GCN hop: `ReLU(W * aggregate(h))` for every node.
pub fn gcn_layer(graph: &ItemGraph, h_prev: &Matrix, w: &Matrix) -> Result<Matrix> {
    gcn_forward(graph, h_prev, w).map(|(out, _)| out)
}

fn check_attention(w: &Matrix, a: &[f64]) -> Result<()> {
    if a.len() != 2 * w.rows() {
        return Err(Error::ShapeMismatch {
            context: "attention vector",
            left: format!("{} values", a.len()),
            right: format!("2 x {} outputs", w.rows()),
        });
    }
    Ok(())
}

/// Softmax over `a . [g_u ; g_v]` for each `g_v`, with the maximum
/// subtracted before exponentiating.
fn attention_weights(g_u: &[f64], g_neighbors: &[&[f64]], a: &[f64]) -> Vec<f64> {
    let (a_src, a_dst) = a.split_at(g_u.len());
    let s = dot(a_src, g_u);
    let logits: Vec<f64> = g_neighbors.iter().map(|g_v| s + dot(a_dst, g_v)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Attention coefficients of `h_u` over `neighbors_h`.
pub fn gat_attention(h_u: &[f64], neighbors_h: &[&[f64]], w: &Matrix, a: &[f64]) -> Result<Vec<f64>> {
    if neighbors_h.is_empty() {
        return Err(Error::NoNeighbors);
    }
    check_attention(w, a)?;
    let apply = |h: &[f64]| -> Result<Vec<f64>> {
        if h.len() != w.cols() {
            return Err(Error::ShapeMismatch {
                context: "attention input",
                left: format!("{} values", h.len()),
                right: w.shape_str(),
            });
        }
        Ok((0..w.rows()).map(|r| dot(w.row(r), h)).collect())
    };
    let g_u = apply(h_u)?;
    let g_v = neighbors_h
        .iter()
        .map(|h| apply(h))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = g_v.iter().map(Vec::as_slice).collect();
    Ok(attention_weights(&g_u, &refs, a))
}

pub(crate) struct GatCache {
    pub h_prev: Matrix,
    pub g: Matrix,
    /// Per node, weights over `neighbors(u)` followed by `u`.
    pub alpha: Vec<Vec<f64>>,
    pub pre: Matrix,
}

fn attention_set(graph: &ItemGraph, u: usize) -> impl Iterator<Item = usize> + '_ {
    graph.neighbors(u).iter().copied().chain(std::iter::once(u))
}

pub(crate) fn gat_forward(
    graph: &ItemGraph,
    h_prev: &Matrix,
    w: &Matrix,
    a: &[f64],
) -> Result<(Matrix, GatCache)> {
    check_nodes(graph, h_prev)?;
    check_weight(h_prev, w)?;
    check_attention(w, a)?;
    let g = h_prev.mul_transposed(w)?;
    let mut pre = Matrix::zeros(g.rows(), g.cols());
    let mut alpha = Vec::with_capacity(g.rows());
    for u in 0..graph.node_count() {
        let rows: Vec<&[f64]> = attention_set(graph, u).map(|v| g.row(v)).collect();
        let weights = attention_weights(g.row(u), &rows, a);
        let dst = pre.row_mut(u);
        for (wv, row) in weights.iter().zip(&rows) {
            for (d, s) in dst.iter_mut().zip(row.iter()) {
                *d += wv * s;
            }
        }
        alpha.push(weights);
    }
    let out = pre.map(relu);
    Ok((
        out,
        GatCache {
            h_prev: h_prev.clone(),
            g,
            alpha,
            pre,
        },
    ))
}

/// Returns `(dW, da, dH_prev)` given the gradient of the layer output.
pub(crate) fn gat_backward(
    graph: &ItemGraph,
    cache: &GatCache,
    w: &Matrix,
    a: &[f64],
    d_out: &Matrix,
) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let d = w.rows();
    let (a_src, a_dst) = a.split_at(d);
    let g = &cache.g;
    let mut d_g = Matrix::zeros(g.rows(), d);
    let mut d_a = vec![0.0; 2 * d];
    for u in 0..graph.node_count() {
        let d_pre: Vec<f64> = d_out
            .row(u)
            .iter()
            .zip(cache.pre.row(u))
            .map(|(dv, p)| if *p > 0.0 { *dv } else { 0.0 })
            .collect();
        if d_pre.iter().all(|x| *x == 0.0) {
            continue;
        }
        let alpha = &cache.alpha[u];
        let set: Vec<usize> = attention_set(graph, u).collect();
        let d_alpha: Vec<f64> = set.iter().map(|&v| dot(&d_pre, g.row(v))).collect();
        let mean: f64 = alpha.iter().zip(&d_alpha).map(|(a, b)| a * b).sum();
        let mut d_src = 0.0;
        for ((&v, &al), &da) in set.iter().zip(alpha).zip(&d_alpha) {
            let d_logit = al * (da - mean);
            d_src += d_logit;
            let g_v = g.row(v).to_vec();
            let row = d_g.row_mut(v);
            for k in 0..d {
                row[k] += al * d_pre[k] + d_logit * a_dst[k];
                d_a[d + k] += d_logit * g_v[k];
            }
        }
        // d_src is zero up to rounding: the source half of the logit is
        // shared by every neighbor and cancels in the softmax
        let g_u = g.row(u).to_vec();
        let row = d_g.row_mut(u);
        for k in 0..d {
            row[k] += d_src * a_src[k];
            d_a[k] += d_src * g_u[k];
        }
    }
    let d_w = d_g.transpose_mul(&cache.h_prev)?;
    let d_h = d_g.matmul(w)?;
    Ok((d_w, d_a, d_h))
}

/// One GAT hop: `ReLU(sum_v alpha_uv W h_v)` over `N(u) + u`.
pub fn gat_layer(graph: &ItemGraph, h_prev: &Matrix, w: &Matrix, a: &[f64]) -> Result<Matrix> {
    gat_forward(graph, h_prev, w, a).map(|(out, _)| out)
}

pub(crate) enum LayerCache {
    Gcn(GcnCache),
    Gat(GatCache),
}

/// Runs every hop and keeps what the backward pass needs.
pub(crate) fn encode_traced(
    graph: &ItemGraph,
    x: &Matrix,
    params: &ModelParams,
) -> Result<(Matrix, Vec<LayerCache>)> {
    check_nodes(graph, x)?;
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(params.hops());
    match params {
        ModelParams::Gcn(p) => {
            for w in &p.weights {
                let (out, cache) = gcn_forward(graph, &h, w)?;
                caches.push(LayerCache::Gcn(cache));
                h = out;
            }
        }
        ModelParams::Gat(p) => {
            for layer in &p.layers {
                let (out, cache) = gat_forward(graph, &h, &layer.weight, &layer.attention)?;
                caches.push(LayerCache::Gat(cache));
                h = out;
            }
        }
    }
    Ok((h, caches))
}

/// Final embeddings `z = h^K` starting from `h^0 = x`.
pub fn encode(graph: &ItemGraph, x: &Matrix, params: &ModelParams) -> Result<EmbeddingMatrix> {
    let (z, _) = encode_traced(graph, x, params)?;
    EmbeddingMatrix::new(z)
}
