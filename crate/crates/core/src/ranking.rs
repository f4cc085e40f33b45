//! Candidate ranking by price-weighted cosine similarity, and the ranking
//! metrics used to evaluate it.
//!
//! Ties are broken everywhere by score descending, then item id ascending.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::encoder::{encode, ModelParams};
use crate::error::{Error, Result};
use crate::graph::{ItemCatalog, ItemGraph, ItemId};
use crate::matrix::{dot, norm, Matrix};
use crate::objective::Lambda;
use crate::training::{train, TrainConfig, TrainOutcome};

/// The recall set of one anchor item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub anchor: ItemId,
    pub candidates: Vec<ItemId>,
}

impl CandidateSet {
    pub fn new(anchor: ItemId, candidates: Vec<ItemId>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(candidates.len());
        for c in &candidates {
            if *c == anchor {
                return Err(Error::invalid("candidates", format!("anchor `{anchor}` listed as its own candidate")));
            }
            if !seen.insert(c) {
                return Err(Error::invalid("candidates", format!("`{c}` listed twice for anchor `{anchor}`")));
            }
        }
        Ok(Self { anchor, candidates })
    }
}

/// Purchase counts per item and time bucket, plus the price of each item.
#[derive(Debug, Clone, Default)]
pub struct TransactionTable {
    counts: HashMap<ItemId, BTreeMap<u32, u64>>,
    buckets: BTreeSet<u32>,
    prices: HashMap<ItemId, f64>,
}

impl TransactionTable {
    pub fn new(prices: HashMap<ItemId, f64>) -> Self {
        Self {
            prices,
            ..Self::default()
        }
    }

    pub fn from_catalog(catalog: &ItemCatalog) -> Self {
        Self::new(
            catalog
                .items()
                .iter()
                .map(|it| (it.id.clone(), it.raw_price))
                .collect(),
        )
    }

    pub fn insert(&mut self, item: ItemId, bucket: u32, count: u64) -> Result<()> {
        let per_item = self.counts.entry(item.clone()).or_default();
        if per_item.insert(bucket, count).is_some() {
            return Err(Error::invalid("transactions", format!("duplicate row for ({item}, {bucket})")));
        }
        self.buckets.insert(bucket);
        Ok(())
    }

    pub fn count(&self, item: &ItemId, bucket: u32) -> u64 {
        self.counts
            .get(item)
            .and_then(|b| b.get(&bucket))
            .copied()
            .unwrap_or(0)
    }

    pub fn buckets(&self) -> impl Iterator<Item = u32> + '_ {
        self.buckets.iter().copied()
    }

    pub fn price(&self, item: &ItemId) -> Result<f64> {
        self.prices
            .get(item)
            .copied()
            .ok_or_else(|| Error::MissingPrice(item.to_string()))
    }

    pub fn rows(&self) -> Vec<(ItemId, u32, u64)> {
        let mut rows: Vec<_> = self
            .counts
            .iter()
            .flat_map(|(item, b)| b.iter().map(move |(&t, &c)| (item.clone(), t, c)))
            .collect();
        rows.sort();
        rows
    }
}

/// Binary relevance of each candidate to its anchor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelevanceLabels {
    labels: BTreeMap<ItemId, BTreeMap<ItemId, u8>>,
}

impl RelevanceLabels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, anchor: ItemId, candidate: ItemId, rel: u8) -> Result<()> {
        if rel > 1 {
            return Err(Error::invalid("rel", format!("{rel} is not 0 or 1")));
        }
        let per_anchor = self.labels.entry(anchor.clone()).or_default();
        if per_anchor.insert(candidate.clone(), rel).is_some() {
            return Err(Error::invalid("labels", format!("duplicate label for ({anchor}, {candidate})")));
        }
        Ok(())
    }

    pub fn get(&self, anchor: &ItemId, candidate: &ItemId) -> Option<u8> {
        self.labels.get(anchor).and_then(|m| m.get(candidate)).copied()
    }

    /// Every labeled candidate of `anchor`, in id order.
    pub fn candidates_of(&self, anchor: &ItemId) -> Vec<ItemId> {
        self.labels
            .get(anchor)
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn relevances_of(&self, anchor: &ItemId) -> Vec<u8> {
        self.labels
            .get(anchor)
            .map(|m| m.values().copied().collect())
            .unwrap_or_default()
    }

    pub fn anchors(&self) -> impl Iterator<Item = &ItemId> {
        self.labels.keys()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ItemId, &ItemId, u8)> {
        self.labels
            .iter()
            .flat_map(|(a, m)| m.iter().map(move |(c, &r)| (a, c, r)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineScore {
    pub value: f64,
    /// Set when either embedding has zero norm; the score is then 0.
    pub degenerate: bool,
}

/// `(1 + lambda (p_u + p_v)) * cos(z_u, z_v)`.
pub fn weighted_cosine(z_u: &[f64], z_v: &[f64], p_u: f64, p_v: f64, lambda: Lambda) -> Result<CosineScore> {
    if z_u.len() != z_v.len() {
        return Err(Error::ShapeMismatch {
            context: "weighted_cosine",
            left: format!("{} values", z_u.len()),
            right: format!("{} values", z_v.len()),
        });
    }
    let denom = norm(z_u) * norm(z_v);
    if denom == 0.0 {
        return Ok(CosineScore {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(CosineScore {
        // + 0.0 folds -0.0 into 0.0 so that signed zeros tie
        value: lambda.multiplier(p_u, p_v) * (dot(z_u, z_v) / denom) + 0.0,
        degenerate: false,
    })
}

fn by_score_then_id(a: &(ItemId, f64), b: &(ItemId, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Top `min(k, |candidates|)` candidates by weighted cosine to the anchor.
/// `z` rows and `prices` follow catalog order.
pub fn rank_candidates(
    set: &CandidateSet,
    catalog: &ItemCatalog,
    z: &Matrix,
    prices: &[f64],
    lambda: Lambda,
    k: usize,
) -> Result<Vec<(ItemId, f64)>> {
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if z.rows() != catalog.len() || prices.len() != catalog.len() {
        return Err(Error::ShapeMismatch {
            context: "rank_candidates",
            left: format!("{} catalog items", catalog.len()),
            right: format!("{} embeddings, {} prices", z.rows(), prices.len()),
        });
    }
    let a = catalog.resolve(&set.anchor)?;
    let mut scored = Vec::with_capacity(set.candidates.len());
    let mut degenerate = 0;
    for c in &set.candidates {
        let j = catalog.resolve(c)?;
        let score = weighted_cosine(z.row(a), z.row(j), prices[a], prices[j], lambda)?;
        degenerate += usize::from(score.degenerate);
        scored.push((c.clone(), score.value));
    }
    if degenerate > 0 {
        log::debug!("{degenerate} zero-norm pairs for anchor {}; scored 0", set.anchor);
    }
    scored.sort_by(by_score_then_id);
    scored.truncate(k);
    Ok(scored)
}

fn discount(position: usize) -> f64 {
    // position is 0-based
    1.0 / ((position + 2) as f64).log2()
}

/// Binary-relevance NDCG of `ranking` for `anchor`. The ideal ordering is
/// taken over every labeled candidate of the anchor; an anchor with no
/// relevant candidate scores 0.
pub fn ndcg_at_k(anchor: &ItemId, ranking: &[ItemId], labels: &RelevanceLabels, k: usize) -> Result<f64> {
    let mut dcg = 0.0;
    for (i, c) in ranking.iter().take(k).enumerate() {
        let rel = labels.get(anchor, c).ok_or_else(|| Error::MissingLabel {
            anchor: anchor.to_string(),
            candidate: c.to_string(),
        })?;
        dcg += f64::from(rel) * discount(i);
    }
    let mut ideal = labels.relevances_of(anchor);
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| f64::from(r) * discount(i))
        .sum();
    if idcg == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg / idcg)
}

/// A ranked list for one anchor together with the anchor's full candidate
/// pool (the denominator of the purchase share).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorRanking {
    pub anchor: ItemId,
    pub pool: Vec<ItemId>,
    pub ranked: Vec<(ItemId, f64)>,
}

impl AnchorRanking {
    pub fn ranked_ids(&self) -> Vec<ItemId> {
        self.ranked.iter().map(|(id, _)| id.clone()).collect()
    }
}

/// Expected GMV of one anchor's top `k`: for every bucket, each top-k
/// item's share of the pool's purchases times its price. Buckets in which
/// the pool has no purchases contribute 0.
pub fn egmv_for_anchor(ranked: &[ItemId], pool: &[ItemId], tx: &TransactionTable, k: usize) -> Result<f64> {
    let top = &ranked[..ranked.len().min(k)];
    let prices = top.iter().map(|id| tx.price(id)).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for t in tx.buckets() {
        let denom: u64 = pool.iter().map(|j| tx.count(j, t)).sum();
        if denom == 0 {
            continue;
        }
        for (id, price) in top.iter().zip(&prices) {
            total += tx.count(id, t) as f64 / denom as f64 * price;
        }
    }
    Ok(total)
}

/// Mean of [`egmv_for_anchor`] over anchors.
pub fn egmv_at_k(rankings: &[AnchorRanking], tx: &TransactionTable, k: usize) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::invalid("rankings", "no anchors to evaluate"));
    }
    let mut sum = 0.0;
    for r in rankings {
        sum += egmv_for_anchor(&r.ranked_ids(), &r.pool, tx, k)?;
    }
    Ok(sum / rankings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub ndcg: f64,
    pub egmv: f64,
    pub anchors: usize,
}

/// Mean NDCG@k and mean EGMV@k over anchors.
pub fn evaluate_rankings(
    rankings: &[AnchorRanking],
    labels: &RelevanceLabels,
    tx: &TransactionTable,
    k: usize,
) -> Result<MetricSummary> {
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    let egmv = egmv_at_k(rankings, tx, k)?;
    let mut ndcg = 0.0;
    for r in rankings {
        ndcg += ndcg_at_k(&r.anchor, &r.ranked_ids(), labels, k)?;
    }
    Ok(MetricSummary {
        ndcg: ndcg / rankings.len() as f64,
        egmv,
        anchors: rankings.len(),
    })
}

/// Ranks every candidate set (keeping the top `k`).
pub fn rank_all(
    sets: &[CandidateSet],
    catalog: &ItemCatalog,
    z: &Matrix,
    lambda: Lambda,
    k: usize,
) -> Result<Vec<AnchorRanking>> {
    let prices = catalog.normalized_prices();
    let dead = (0..z.rows()).filter(|&i| norm(z.row(i)) == 0.0).count();
    if dead > 0 {
        log::warn!("{dead} of {} embeddings have zero norm; their pairs score 0", z.rows());
    }
    sets.iter()
        .map(|set| {
            Ok(AnchorRanking {
                anchor: set.anchor.clone(),
                pool: set.candidates.clone(),
                ranked: rank_candidates(set, catalog, z, &prices, lambda, k)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub lambda: Lambda,
    pub metrics: MetricSummary,
    pub outcome: TrainOutcome,
    pub rankings: Vec<AnchorRanking>,
}

/// Data shared by every run of a sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepInputs<'a> {
    pub graph: &'a ItemGraph,
    pub catalog: &'a ItemCatalog,
    pub candidate_sets: &'a [CandidateSet],
    pub transactions: &'a TransactionTable,
    pub labels: &'a RelevanceLabels,
}

/// Trains one model per lambda (same seed), encodes over the full graph,
/// ranks with the same lambda, and evaluates. Rows are sorted by lambda.
pub fn lambda_sweep(
    inputs: SweepInputs<'_>,
    config: &TrainConfig,
    lambdas: &[Lambda],
    metric_k: usize,
) -> Result<Vec<SweepRun>> {
    if lambdas.is_empty() {
        return Err(Error::invalid("lambdas", "at least one value is required"));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(|a, b| a.value().total_cmp(&b.value()));
    sorted.dedup();
    sorted
        .into_iter()
        .map(|lambda| {
            let cfg = TrainConfig {
                lambda,
                ..config.clone()
            };
            let outcome = train(inputs.graph, inputs.catalog, &cfg)?;
            let rankings = rank_with(&outcome.params, inputs, lambda, metric_k)?;
            let metrics = evaluate_rankings(&rankings, inputs.labels, inputs.transactions, metric_k)?;
            log::info!(
                "lambda {lambda}: ndcg@{metric_k} {:.4} egmv@{metric_k} {:.4}",
                metrics.ndcg,
                metrics.egmv
            );
            Ok(SweepRun {
                lambda,
                metrics,
                outcome,
                rankings,
            })
        })
        .collect()
}

fn rank_with(params: &ModelParams, inputs: SweepInputs<'_>, lambda: Lambda, k: usize) -> Result<Vec<AnchorRanking>> {
    let z = encode(inputs.graph, inputs.catalog.embeddings(), params)?;
    rank_all(inputs.candidate_sets, inputs.catalog, z.matrix(), lambda, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> ItemId {
        ItemId::new(s).unwrap()
    }

    fn lam(x: f64) -> Lambda {
        Lambda::new(x).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let s = weighted_cosine(&[0.6, 0.8], &[0.6, 0.8], 0.3, 0.7, Lambda::ZERO).unwrap();
        assert!((s.value - 1.0).abs() < 1e-15);
        let s = weighted_cosine(&[1.0, 0.0], &[0.0, 3.0], 1.0, 1.0, lam(5.0)).unwrap();
        assert_eq!(s.value, 0.0);
        let s = weighted_cosine(&[1.0, 0.0], &[1.0, 0.0], 1.0, 1.0, lam(0.5)).unwrap();
        assert_eq!(s.value, 2.0);
        let s = weighted_cosine(&[0.0, 0.0], &[1.0, 0.0], 1.0, 1.0, lam(0.5)).unwrap();
        assert!(s.degenerate && s.value == 0.0);
    }

    fn catalog(rows: Vec<Vec<f64>>, prices: &[f64]) -> ItemCatalog {
        ItemCatalog::new(
            prices
                .iter()
                .enumerate()
                .map(|(i, p)| (id(&format!("c{i}")), *p))
                .collect(),
            Matrix::from_rows(&rows).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn price_breaks_equal_cosine() {
        let cos = 0.9f64;
        let sin = (1.0 - cos * cos).sqrt();
        let rows = vec![vec![1.0, 0.0], vec![cos, sin], vec![cos, -sin]];
        let cat = catalog(rows, &[0.0, 0.2, 0.8]);
        let set = CandidateSet::new(id("c0"), vec![id("c1"), id("c2")]).unwrap();
        let prices = [0.0, 0.2, 0.8];
        let ranked = rank_candidates(&set, &cat, cat.embeddings(), &prices, lam(1.0), 5).unwrap();
        assert_eq!(ranked[0].0, id("c2"));
        assert_eq!(ranked.len(), 2);
        let ranked = rank_candidates(&set, &cat, cat.embeddings(), &prices, Lambda::ZERO, 5).unwrap();
        // equal scores fall back to id order
        assert_eq!(ranked[0].0, id("c1"));
    }

    #[test]
    fn empty_candidate_set_ranks_to_nothing() {
        let cat = catalog(vec![vec![1.0]], &[1.0]);
        let set = CandidateSet::new(id("c0"), vec![]).unwrap();
        assert!(rank_candidates(&set, &cat, cat.embeddings(), &[0.0], Lambda::ZERO, 3)
            .unwrap()
            .is_empty());
        assert!(rank_candidates(&set, &cat, cat.embeddings(), &[0.0], Lambda::ZERO, 0).is_err());
    }

    #[test]
    fn candidate_set_validation() {
        assert!(CandidateSet::new(id("a"), vec![id("a")]).is_err());
        assert!(CandidateSet::new(id("a"), vec![id("b"), id("b")]).is_err());
    }

    #[test]
    fn ndcg_closed_forms() {
        let mut labels = RelevanceLabels::new();
        labels.insert(id("a"), id("x"), 1).unwrap();
        assert_eq!(ndcg_at_k(&id("a"), &[id("x")], &labels, 1).unwrap(), 1.0);

        let mut labels = RelevanceLabels::new();
        labels.insert(id("a"), id("x"), 0).unwrap();
        labels.insert(id("a"), id("y"), 1).unwrap();
        let v = ndcg_at_k(&id("a"), &[id("x"), id("y")], &labels, 2).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.6309).abs() < 1e-4);

        let err = ndcg_at_k(&id("a"), &[id("z")], &labels, 1).unwrap_err().to_string();
        assert!(err.contains("(a, z)"), "{err}");

        let mut none = RelevanceLabels::new();
        none.insert(id("a"), id("x"), 0).unwrap();
        assert_eq!(ndcg_at_k(&id("a"), &[id("x")], &none, 1).unwrap(), 0.0);
        assert!(none.insert(id("a"), id("y"), 2).is_err());
    }

    fn hand_table() -> TransactionTable {
        let mut tx = TransactionTable::new([(id("p"), 10.0), (id("q"), 20.0)].into_iter().collect());
        tx.insert(id("p"), 0, 3).unwrap();
        tx.insert(id("q"), 0, 1).unwrap();
        tx
    }

    #[test]
    fn egmv_hand_case() {
        let tx = hand_table();
        let pool = [id("p"), id("q")];
        assert_eq!(egmv_for_anchor(&pool, &pool, &tx, 2).unwrap(), 12.5);
        assert_eq!(egmv_for_anchor(&pool, &pool, &tx, 1).unwrap(), 7.5);
        assert!(hand_table().insert(id("p"), 0, 1).is_err());
    }

    #[test]
    fn egmv_missing_price_and_empty_bucket() {
        let mut tx = hand_table();
        tx.insert(id("r"), 1, 0).unwrap();
        let err = egmv_for_anchor(&[id("r")], &[id("r")], &tx, 1).unwrap_err();
        assert!(matches!(err, Error::MissingPrice(_)));

        let mut tx = TransactionTable::new([(id("p"), 10.0)].into_iter().collect());
        tx.insert(id("p"), 4, 0).unwrap();
        assert_eq!(egmv_for_anchor(&[id("p")], &[id("p")], &tx, 1).unwrap(), 0.0);
    }
}
