//! Reverse-mode gradients, Adam, and the full-batch training loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::{encode, encode_traced, gat_backward, gcn_backward, LayerCache, ModelKind, ModelParams};
use crate::error::{Error, Result};
use crate::graph::{split_edges, EdgeSplit, ItemCatalog, ItemGraph};
use crate::matrix::{dot, Matrix};
use crate::objective::{loss_with_grad, sample_negatives, sigmoid, EdgeBatch, Lambda, LossKind, DEFAULT_MARGIN};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Seed offset used for the negatives of the held-out evaluation batch, so
/// they never coincide with a training epoch's draw.
pub const EVAL_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub hops: usize,
    pub output_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub lambda: Lambda,
    pub loss_kind: LossKind,
    pub margin: f64,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::Gcn,
            hops: 2,
            output_dim: 256,
            learning_rate: 0.1,
            epochs: 20,
            lambda: Lambda::ZERO,
            loss_kind: LossKind::Bce,
            margin: DEFAULT_MARGIN,
            seed: 0,
            train_fraction: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hops == 0 {
            return Err(Error::invalid("hops", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.output_dim == 0 {
            return Err(Error::invalid("output_dim", "must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", format!("{} is not positive", self.learning_rate)));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::invalid("margin", format!("{} is not a nonnegative margin", self.margin)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction", format!("{} is not in (0, 1)", self.train_fraction)));
        }
        Ok(())
    }

    /// Layer widths `[input_dim, output_dim, ..., output_dim]`.
    pub fn dims(&self, input_dim: usize) -> Vec<usize> {
        std::iter::once(input_dim)
            .chain(std::iter::repeat_n(self.output_dim, self.hops))
            .collect()
    }
}

/// Evaluates the loss on `batch` and its exact gradient with respect to
/// every parameter. The ReLU subgradient at 0 is taken to be 0.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    graph: &ItemGraph,
    x: &Matrix,
    params: &ModelParams,
    batch: &EdgeBatch,
    prices: &[f64],
    lambda: Lambda,
    loss_kind: LossKind,
    delta: f64,
) -> Result<(f64, ModelParams)> {
    let (z, caches) = encode_traced(graph, x, params)?;
    let (loss, d_z) = loss_with_grad(loss_kind, batch, &z, prices, lambda, delta)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch_seed: batch.seed,
            loss,
        });
    }
    let mut grads = params.zeros_like();
    let mut d_h = d_z;
    match (params, &mut grads) {
        (ModelParams::Gcn(p), ModelParams::Gcn(g)) => {
            for k in (0..p.weights.len()).rev() {
                let LayerCache::Gcn(cache) = &caches[k] else {
                    unreachable!("gcn params produce gcn caches")
                };
                let (d_w, d_prev) = gcn_backward(graph, cache, &p.weights[k], &d_h)?;
                g.weights[k] = d_w;
                d_h = d_prev;
            }
        }
        (ModelParams::Gat(p), ModelParams::Gat(g)) => {
            for k in (0..p.layers.len()).rev() {
                let LayerCache::Gat(cache) = &caches[k] else {
                    unreachable!("gat params produce gat caches")
                };
                let layer = &p.layers[k];
                let (d_w, d_a, d_prev) = gat_backward(graph, cache, &layer.weight, &layer.attention, &d_h)?;
                g.layers[k].weight = d_w;
                g.layers[k].attention = d_a;
                d_h = d_prev;
            }
        }
        _ => unreachable!("zeros_like preserves the model kind"),
    }
    if grads.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFiniteLoss {
            batch_seed: batch.seed,
            loss: f64::NAN,
        });
    }
    Ok((loss, grads))
}

/// Bias-corrected first and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self::new(&shapes)
    }

    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> Result<()> {
        let shape_err = || Error::ShapeMismatch {
            context: "adam_step",
            left: format!("{} tensors", self.m.len()),
            right: "gradient tensors".to_string(),
        };
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(shape_err());
        }
        for ((p, g), m) in params.iter().zip(&grads).zip(&self.m) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(shape_err());
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            }
        }
        Ok(())
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.kind() != grads.kind() {
        return Err(Error::ShapeMismatch {
            context: "adam_step",
            left: params.kind().to_string(),
            right: grads.kind().to_string(),
        });
    }
    state.update(params.tensors_mut(), grads.tensors(), lr)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Loss per epoch, evaluated before that epoch's update.
    pub history: Vec<f64>,
    pub epoch_ms: Vec<u128>,
    pub split: EdgeSplit,
}

impl TrainOutcome {
    /// Graph over the training edges only.
    pub fn train_graph(&self, node_count: usize) -> Result<ItemGraph> {
        ItemGraph::from_edges(node_count, &self.split.train_edges)
    }
}

/// Splits the edges, then runs `epochs` full-batch steps. Each epoch uses
/// every training edge as a positive and draws fresh negatives from the
/// non-edges of the full `graph` with seed `config.seed + epoch`.
pub fn train(graph: &ItemGraph, catalog: &ItemCatalog, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if graph.node_count() != catalog.len() {
        return Err(Error::ShapeMismatch {
            context: "train",
            left: format!("{} graph nodes", graph.node_count()),
            right: format!("{} catalog items", catalog.len()),
        });
    }
    if !catalog.embeddings().is_finite() {
        return Err(Error::invalid("embeddings", "initial embeddings contain non-finite values"));
    }
    let split = split_edges(graph, config.train_fraction, config.seed)?;
    if split.train_edges.len() < 2 {
        return Err(Error::TooFewEdges(split.train_edges.len()));
    }
    let train_graph = ItemGraph::from_edges(graph.node_count(), &split.train_edges)?;
    let x = catalog.embeddings();
    let prices = catalog.normalized_prices();
    let mut params = ModelParams::init(config.model_kind, &config.dims(catalog.dim()), config.seed)?;
    let mut state = OptimizerState::for_params(&params);
    let mut history = Vec::with_capacity(config.epochs);
    let mut epoch_ms = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let batch = EdgeBatch::sample(split.train_edges.clone(), graph, config.seed.wrapping_add(epoch as u64))?;
        let step = backward(
            &train_graph,
            x,
            &params,
            &batch,
            &prices,
            config.lambda,
            config.loss_kind,
            config.margin,
        );
        let (loss, grads) = match step {
            Ok(r) => r,
            Err(Error::NonFiniteLoss { .. }) => {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    last_good: Box::new(params),
                    history,
                })
            }
            Err(e) => return Err(e),
        };
        let last_good = params.clone();
        adam_step(&mut params, &grads, &mut state, config.learning_rate)?;
        params.round_to_f32();
        if params.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                last_good: Box::new(last_good),
                history,
            });
        }
        log::debug!("epoch {} loss {loss:.6}", epoch + 1);
        history.push(loss);
        epoch_ms.push(started.elapsed().as_millis());
    }
    Ok(TrainOutcome {
        params,
        history,
        epoch_ms,
        split,
    })
}

/// Fraction of pairs classified correctly by `sigmoid(DEC) > 0.5`.
pub fn link_accuracy(
    z: &Matrix,
    prices: &[f64],
    lambda: Lambda,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
) -> f64 {
    let predict = |&(u, v): &(usize, usize)| {
        let d = lambda.multiplier(prices[u], prices[v]) * dot(z.row(u), z.row(v));
        sigmoid(d) > 0.5
    };
    let correct = positives.iter().filter(|p| predict(p)).count() + negatives.iter().filter(|p| !predict(p)).count();
    correct as f64 / (positives.len() + negatives.len()) as f64
}

/// Held-out link-prediction accuracy: test edges against an equal number of
/// fresh non-edges, encoding over the training graph.
pub fn held_out_accuracy(
    outcome: &TrainOutcome,
    graph: &ItemGraph,
    catalog: &ItemCatalog,
    config: &TrainConfig,
) -> Result<f64> {
    let train_graph = outcome.train_graph(graph.node_count())?;
    let z = encode(&train_graph, catalog.embeddings(), &outcome.params)?;
    let positives = &outcome.split.test_edges;
    let negatives = sample_negatives(graph, positives.len(), config.seed.wrapping_add(EVAL_SEED_OFFSET))?;
    Ok(link_accuracy(
        z.matrix(),
        &catalog.normalized_prices(),
        config.lambda,
        positives,
        &negatives,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::GcnParams;
    use crate::graph::ItemId;

    #[test]
    fn zero_input_gives_zero_first_layer_gradient() {
        let g = ItemGraph::from_edges(4, &[(0, 1), (1, 2)]).unwrap();
        let x = Matrix::zeros(4, 3);
        let batch = EdgeBatch {
            positives: vec![(0, 1), (1, 2)],
            negatives: vec![(0, 3), (2, 3)],
            seed: 0,
        };
        for kind in [ModelKind::Gcn, ModelKind::Gat] {
            let params = ModelParams::init(kind, &[3, 4, 2], 1).unwrap();
            let (_, grads) =
                backward(&g, &x, &params, &batch, &[0.5; 4], Lambda::ZERO, LossKind::Bce, 1.0).unwrap();
            assert!(grads.tensors()[0].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn scalar_gcn_gradient_matches_closed_form() {
        // u=0 and v=1 share an edge, c=2 is isolated; one positive (0,1)
        // and one negative (0,2). Both degrees are 1, so the neighbourhood
        // coefficient is 1/2 and z_0 = z_1 = w (x_0 + x_1) / 2, z_2 = w x_2.
        let g = ItemGraph::from_edges(3, &[(0, 1)]).unwrap();
        let (x0, x1, x2, w) = (0.8, 0.4, 0.5, 0.7);
        let x = Matrix::from_rows(&[vec![x0], vec![x1], vec![x2]]).unwrap();
        let params = ModelParams::Gcn(GcnParams {
            weights: vec![Matrix::from_rows(&[vec![w]]).unwrap()],
        });
        let batch = EdgeBatch {
            positives: vec![(0, 1)],
            negatives: vec![(0, 2)],
            seed: 0,
        };
        let (loss, grads) =
            backward(&g, &x, &params, &batch, &[0.0; 3], Lambda::ZERO, LossKind::Bce, 1.0).unwrap();

        let s = (x0 + x1) / 2.0;
        let d1 = w * w * s * s;
        let d2 = w * w * s * x2;
        let expected_loss = -0.5 * (sigmoid(d1).ln() + (1.0 - sigmoid(d2)).ln());
        let expected_grad = 0.5 * ((sigmoid(d1) - 1.0) * 2.0 * w * s * s + sigmoid(d2) * 2.0 * w * s * x2);
        assert!((loss - expected_loss).abs() < 1e-14);
        assert!((grads.tensors()[0][0] - expected_grad).abs() < 1e-14);
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut p = vec![1.5, -2.0];
        let mut state = OptimizerState::new(&[2]);
        state.update(vec![&mut p], vec![&[0.0, 0.0]], 0.1).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        let mut p = vec![0.0, 0.0, 0.0];
        let mut state = OptimizerState::new(&[3]);
        state.update(vec![&mut p], vec![&[3.0, -0.02, 400.0]], 0.1).unwrap();
        for (got, want) in p.iter().zip([-0.1, 0.1, -0.1]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        // f(x, y) = (x - 1)^2 + 10 (y + 2)^2, minimized at (1, -2)
        let mut p = vec![0.8, -1.8];
        let mut state = OptimizerState::new(&[2]);
        for _ in 0..100 {
            let g = [2.0 * (p[0] - 1.0), 20.0 * (p[1] + 2.0)];
            state.update(vec![&mut p], vec![&g], 0.03).unwrap();
        }
        assert_eq!(state.step, 100);
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 2.0).abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = vec![0.0, 0.0];
        let mut state = OptimizerState::new(&[2]);
        assert!(state.update(vec![&mut p], vec![&[1.0]], 0.1).is_err());
        assert_eq!(state.step, 0);
    }

    fn toy_catalog(n: usize, d: usize) -> ItemCatalog {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|k| if (i < n / 2) == (k % 2 == 0) { 1.0 } else { 0.1 }).collect())
            .collect();
        ItemCatalog::new(
            (0..n)
                .map(|i| (ItemId::new(format!("t{i}")).unwrap(), 1.0 + i as f64))
                .collect(),
            Matrix::from_rows(&rows).unwrap(),
        )
        .unwrap()
    }

    fn toy_graph(n: usize) -> ItemGraph {
        let half = n / 2;
        let mut pairs = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if (u < half) == (v < half) && (v - u) % 2 == 1 {
                    pairs.push((u, v));
                }
            }
        }
        ItemGraph::from_edges(n, &pairs).unwrap()
    }

    #[test]
    fn config_validation() {
        let cat = toy_catalog(8, 4);
        let g = toy_graph(8);
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train(&g, &cat, &bad).is_err());
        let one = TrainConfig {
            epochs: 1,
            output_dim: 4,
            ..TrainConfig::default()
        };
        assert_eq!(train(&g, &cat, &one).unwrap().history.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let cat = toy_catalog(10, 6);
        let g = toy_graph(10);
        let config = TrainConfig {
            model_kind: ModelKind::Gat,
            output_dim: 8,
            epochs: 5,
            lambda: Lambda::new(0.5).unwrap(),
            ..TrainConfig::default()
        };
        let a = train(&g, &cat, &config).unwrap();
        let b = train(&g, &cat, &config).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn divergence_keeps_last_good_parameters() {
        let cat = toy_catalog(10, 4);
        let config = TrainConfig {
            output_dim: 4,
            epochs: 3,
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        match train(&toy_graph(10), &cat, &config) {
            Err(Error::Diverged { epoch, last_good, .. }) => {
                assert_eq!(epoch, 1);
                assert_eq!(last_good.dims(), vec![4, 4, 4]);
                assert!(last_good.tensors().iter().all(|t| t.iter().all(|x| x.is_finite())));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
