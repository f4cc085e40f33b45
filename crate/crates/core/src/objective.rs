//! Price-weighted link decoder, link-prediction losses and negative sampling.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ItemGraph;
use crate::matrix::{dot, Matrix};

/// Lower clamp applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;
pub const DEFAULT_MARGIN: f64 = 1.0;

/// Weight of the price term in the decoder and in ranking. Finite and
/// nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Lambda(f64);

impl Lambda {
    pub const ZERO: Lambda = Lambda(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::invalid("lambda", format!("{value} is not a finite nonnegative number")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `1 + lambda * (p_u + p_v)`.
    pub fn multiplier(self, p_u: f64, p_v: f64) -> f64 {
        1.0 + self.0 * (p_u + p_v)
    }
}

impl TryFrom<f64> for Lambda {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Lambda::new(value)
    }
}

impl From<Lambda> for f64 {
    fn from(l: Lambda) -> f64 {
        l.0
    }
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    MaxMargin,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Bce => "bce",
            LossKind::MaxMargin => "margin",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "margin" | "max_margin" | "max-margin" => Ok(LossKind::MaxMargin),
            other => Err(Error::invalid("loss", format!("unknown loss kind `{other}`"))),
        }
    }
}

/// Positive pairs (label 1) and sampled negative pairs (label 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeBatch {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
    pub seed: u64,
}

impl EdgeBatch {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Uses `positives` and draws as many negatives from `exclude`'s
    /// non-edges.
    pub fn sample(positives: Vec<(usize, usize)>, exclude: &ItemGraph, seed: u64) -> Result<Self> {
        let negatives = sample_negatives(exclude, positives.len(), seed)?;
        Ok(Self {
            positives,
            negatives,
            seed,
        })
    }
}

/// `(1 + lambda (p_u + p_v)) * z_u . z_v`. A negative inner product is
/// amplified by the price multiplier just like a positive one.
pub fn decode(z_u: &[f64], z_v: &[f64], p_u: f64, p_v: f64, lambda: Lambda) -> Result<f64> {
    if z_u.len() != z_v.len() {
        return Err(Error::ShapeMismatch {
            context: "decode",
            left: format!("{} values", z_u.len()),
            right: format!("{} values", z_v.len()),
        });
    }
    Ok(lambda.multiplier(p_u, p_v) * dot(z_u, z_v))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_inputs(pairs: &[(usize, usize)], z: &Matrix, prices: &[f64]) -> Result<()> {
    if prices.len() != z.rows() {
        return Err(Error::ShapeMismatch {
            context: "prices",
            left: format!("{} prices", prices.len()),
            right: format!("{} embedding rows", z.rows()),
        });
    }
    if let Some(&(u, v)) = pairs.iter().find(|(u, v)| *u >= z.rows() || *v >= z.rows()) {
        return Err(Error::invalid("batch", format!("pair ({u}, {v}) out of range")));
    }
    Ok(())
}

fn accumulate(grad: &mut Matrix, z: &Matrix, u: usize, v: usize, scale: f64) {
    for k in 0..z.cols() {
        let (zu, zv) = (z[(u, k)], z[(v, k)]);
        grad[(u, k)] += scale * zv;
        grad[(v, k)] += scale * zu;
    }
}

/// `-log(max(sigma(d), clamp))` for a positive, and the derivative of the
/// unclamped term `-log(sigma(d))` in `d`. Past the clamp the returned slope
/// is the logistic one rather than zero, so saturated pairs keep pulling.
fn bce_positive(d: f64) -> (f64, f64) {
    let p = sigmoid(d);
    if p > LOG_CLAMP {
        (-p.ln(), -sigmoid(-d))
    } else {
        (-LOG_CLAMP.ln(), -sigmoid(-d))
    }
}

fn bce_negative(d: f64) -> (f64, f64) {
    let q = sigmoid(-d);
    if q > LOG_CLAMP {
        (-q.ln(), sigmoid(d))
    } else {
        (-LOG_CLAMP.ln(), sigmoid(d))
    }
}

/// Mean binary cross-entropy over all positive and negative pairs, together
/// with its gradient with respect to `z`.
pub fn bce_loss_with_grad(
    batch: &EdgeBatch,
    z: &Matrix,
    prices: &[f64],
    lambda: Lambda,
) -> Result<(f64, Matrix)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_inputs(&batch.positives, z, prices)?;
    check_inputs(&batch.negatives, z, prices)?;
    let n = batch.len() as f64;
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    let mut total = 0.0;
    let terms = batch
        .positives
        .iter()
        .map(|p| (p, true))
        .chain(batch.negatives.iter().map(|p| (p, false)));
    for (&(u, v), positive) in terms {
        let m = lambda.multiplier(prices[u], prices[v]);
        let d = m * dot(z.row(u), z.row(v));
        let (loss, d_dec) = if positive { bce_positive(d) } else { bce_negative(d) };
        total += loss;
        if d_dec != 0.0 {
            accumulate(&mut grad, z, u, v, d_dec * m / n);
        }
    }
    Ok((total / n, grad))
}

pub fn bce_loss(batch: &EdgeBatch, z: &Matrix, prices: &[f64], lambda: Lambda) -> Result<f64> {
    bce_loss_with_grad(batch, z, prices, lambda).map(|(l, _)| l)
}

/// Sum of hinge terms `max(0, -DEC(pos_i) + DEC(neg_i) + delta)` with the
/// i-th positive matched to the i-th negative, and its gradient in `z`.
pub fn max_margin_loss_with_grad(
    batch: &EdgeBatch,
    z: &Matrix,
    prices: &[f64],
    lambda: Lambda,
    delta: f64,
) -> Result<(f64, Matrix)> {
    if batch.positives.len() != batch.negatives.len() {
        return Err(Error::invalid(
            "batch",
            format!(
                "{} positives but {} negatives",
                batch.positives.len(),
                batch.negatives.len()
            ),
        ));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::invalid("delta", format!("{delta} is not a nonnegative margin")));
    }
    check_inputs(&batch.positives, z, prices)?;
    check_inputs(&batch.negatives, z, prices)?;
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    let mut total = 0.0;
    for (&(u, v), &(un, vn)) in batch.positives.iter().zip(&batch.negatives) {
        let m_pos = lambda.multiplier(prices[u], prices[v]);
        let m_neg = lambda.multiplier(prices[un], prices[vn]);
        let hinge = -m_pos * dot(z.row(u), z.row(v)) + m_neg * dot(z.row(un), z.row(vn)) + delta;
        if hinge > 0.0 {
            total += hinge;
            accumulate(&mut grad, z, u, v, -m_pos);
            accumulate(&mut grad, z, un, vn, m_neg);
        }
    }
    Ok((total, grad))
}

pub fn max_margin_loss(
    batch: &EdgeBatch,
    z: &Matrix,
    prices: &[f64],
    lambda: Lambda,
    delta: f64,
) -> Result<f64> {
    max_margin_loss_with_grad(batch, z, prices, lambda, delta).map(|(l, _)| l)
}

pub fn loss_with_grad(
    kind: LossKind,
    batch: &EdgeBatch,
    z: &Matrix,
    prices: &[f64],
    lambda: Lambda,
    delta: f64,
) -> Result<(f64, Matrix)> {
    match kind {
        LossKind::Bce => bce_loss_with_grad(batch, z, prices, lambda),
        LossKind::MaxMargin => max_margin_loss_with_grad(batch, z, prices, lambda, delta),
    }
}

/// Draws `count` distinct node pairs uniformly from the non-edges of
/// `graph`. Pairs are returned as `(min, max)` in draw order.
pub fn sample_negatives(graph: &ItemGraph, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if count == 0 {
        return Err(Error::invalid("count", "at least one negative is required"));
    }
    let n = graph.node_count();
    if n < 2 || graph.is_complete() {
        return Err(Error::NoNegativePairs);
    }
    let available = n * (n - 1) / 2 - graph.edge_count();
    if count > available {
        return Err(Error::NotEnoughNegatives {
            requested: count,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v {
            continue;
        }
        let pair = (u.min(v), u.max(v));
        if graph.has_edge(pair.0, pair.1) || !seen.insert(pair) {
            continue;
        }
        out.push(pair);
    }
    Ok(out)
}
