//! Planted-structure synthetic benchmark.
//!
//! Items fall into clusters. Embeddings are a per-cluster centroid plus
//! Gaussian noise, and interaction counts are dense within a cluster (high
//! co-view and view-then-buy) and co-purchase dominated across designated
//! complementary cluster pairs. Candidate sets are the anchor's cluster
//! mates, all equally relevant, with a flat purchase propensity so that
//! expected GMV depends on price alone.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats;
use crate::graph::{InteractionCounts, InteractionStats, ItemId, DEFAULT_EMBEDDING_DIM};
use crate::matrix::Matrix;
use crate::objective::Lambda;
use crate::pipeline::{RunManifest, MANIFEST_VERSION};
use crate::ranking::{CandidateSet, RelevanceLabels, TransactionTable};
use crate::training::TrainConfig;

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceBand {
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub version: u32,
    pub cluster_count: usize,
    pub items_per_cluster: usize,
    pub embedding_dim: usize,
    /// Standard deviation of centroid coordinates.
    pub centroid_scale: f64,
    /// Standard deviation of per-item noise around the centroid.
    pub noise_scale: f64,
    /// One band shared by every cluster, or one per cluster.
    pub price_bands: Vec<PriceBand>,
    /// Poisson means for within-cluster pairs.
    pub within_cv_mean: f64,
    pub within_vb_mean: f64,
    /// Cluster pairs whose items are bought together but rarely viewed
    /// together.
    pub complementary_pairs: Vec<(usize, usize)>,
    pub cross_cv_mean: f64,
    pub cross_cp_mean: f64,
    /// Cross-cluster candidates (relevance 0) added to every anchor's pool.
    pub distractors_per_anchor: usize,
    pub transaction_buckets: u32,
    /// Purchases per item per bucket.
    pub transaction_count: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            version: SPEC_VERSION,
            cluster_count: 2,
            items_per_cluster: 20,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            centroid_scale: 0.2,
            noise_scale: 0.2,
            price_bands: vec![PriceBand { low: 1.0, high: 10.0 }, PriceBand { low: 5.0, high: 50.0 }],
            within_cv_mean: 4.0,
            within_vb_mean: 1.0,
            complementary_pairs: vec![(0, 1)],
            cross_cv_mean: 1.0,
            cross_cp_mean: 3.0,
            distractors_per_anchor: 0,
            transaction_buckets: 4,
            transaction_count: 5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.version != SPEC_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: SPEC_VERSION,
            });
        }
        if self.cluster_count == 0 || self.items_per_cluster == 0 || self.embedding_dim == 0 {
            return Err(Error::invalid("synthetic spec", "all counts must be at least 1"));
        }
        if self.transaction_buckets == 0 || self.transaction_count == 0 {
            return Err(Error::invalid("synthetic spec", "transaction counts must be at least 1"));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::invalid("noise_scale", "must be finite and nonnegative"));
        }
        if !(self.centroid_scale.is_finite() && self.centroid_scale > 0.0) {
            return Err(Error::invalid("centroid_scale", "must be finite and positive"));
        }
        for (name, m) in [
            ("within_cv_mean", self.within_cv_mean),
            ("within_vb_mean", self.within_vb_mean),
            ("cross_cv_mean", self.cross_cv_mean),
            ("cross_cp_mean", self.cross_cp_mean),
        ] {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::invalid(name, "must be finite and nonnegative"));
            }
        }
        if self.price_bands.len() != 1 && self.price_bands.len() != self.cluster_count {
            return Err(Error::invalid(
                "price_bands",
                format!("expected 1 or {} bands, found {}", self.cluster_count, self.price_bands.len()),
            ));
        }
        for b in &self.price_bands {
            if !(b.low.is_finite() && b.high.is_finite() && 0.0 <= b.low && b.low <= b.high) {
                return Err(Error::invalid("price_bands", format!("bad band [{}, {}]", b.low, b.high)));
            }
        }
        for &(a, b) in &self.complementary_pairs {
            if a == b || a >= self.cluster_count || b >= self.cluster_count {
                return Err(Error::invalid(
                    "complementary_pairs",
                    format!("({a}, {b}) is not a pair of distinct clusters"),
                ));
            }
        }
        let outside = (self.cluster_count - 1) * self.items_per_cluster;
        if self.distractors_per_anchor > outside {
            return Err(Error::invalid(
                "distractors_per_anchor",
                format!("only {outside} items lie outside each cluster"),
            ));
        }
        Ok(())
    }

    pub fn item_count(&self) -> usize {
        self.cluster_count * self.items_per_cluster
    }

    fn band(&self, cluster: usize) -> PriceBand {
        self.price_bands[if self.price_bands.len() == 1 { 0 } else { cluster }]
    }

    fn is_complementary(&self, a: usize, b: usize) -> bool {
        self.complementary_pairs
            .iter()
            .any(|&(x, y)| (x, y) == (a, b) || (y, x) == (a, b))
    }
}

/// The generated benchmark, in memory.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub items: Vec<(ItemId, f64)>,
    pub clusters: Vec<usize>,
    pub embeddings: Matrix,
    pub interactions: InteractionStats,
    pub candidate_sets: Vec<CandidateSet>,
    pub transactions: TransactionTable,
    pub labels: RelevanceLabels,
}

pub fn synthetic_item_id(i: usize) -> ItemId {
    ItemId::new(format!("item{i:05}")).expect("non-empty id")
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("positive finite mean");
    d.sample(rng) as u64
}

/// Generates the benchmark. The same spec always yields the same data.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let n = spec.item_count();
    let d = spec.embedding_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let clusters: Vec<usize> = (0..n).map(|i| i / spec.items_per_cluster).collect();
    let ids: Vec<ItemId> = (0..n).map(synthetic_item_id).collect();

    let centroids: Vec<Vec<f64>> = (0..spec.cluster_count)
        .map(|_| (0..d).map(|_| spec.centroid_scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut emb = Vec::with_capacity(n * d);
    for &c in &clusters {
        for &mu in &centroids[c] {
            let noise: f64 = rng.sample(StandardNormal);
            // stored at the precision of the embedding file
            emb.push(f64::from((mu + spec.noise_scale * noise) as f32));
        }
    }
    let embeddings = Matrix::from_vec(n, d, emb)?;

    let items: Vec<(ItemId, f64)> = ids
        .iter()
        .zip(&clusters)
        .map(|(id, &c)| {
            let band = spec.band(c);
            let p = if band.high > band.low {
                rng.random_range(band.low..=band.high)
            } else {
                band.low
            };
            (id.clone(), p)
        })
        .collect();

    let mut interactions = InteractionStats::new();
    for u in 0..n {
        for v in u + 1..n {
            let (cu, cv) = (clusters[u], clusters[v]);
            let counts = if cu == cv {
                InteractionCounts {
                    cv: poisson(&mut rng, spec.within_cv_mean),
                    vb_uv: poisson(&mut rng, spec.within_vb_mean),
                    vb_vu: poisson(&mut rng, spec.within_vb_mean),
                    cp: 0,
                }
            } else if spec.is_complementary(cu, cv) {
                // co-purchases always outnumber the other signals
                let cv = poisson(&mut rng, spec.cross_cv_mean);
                InteractionCounts {
                    cv,
                    vb_uv: 0,
                    vb_vu: 0,
                    cp: cv + 1 + poisson(&mut rng, spec.cross_cp_mean),
                }
            } else {
                continue;
            };
            if counts != InteractionCounts::default() {
                interactions.insert(ids[u].clone(), ids[v].clone(), counts)?;
            }
        }
    }

    let mut candidate_sets = Vec::with_capacity(n);
    let mut labels = RelevanceLabels::new();
    for a in 0..n {
        let mut pool: Vec<usize> = (0..n).filter(|&j| j != a && clusters[j] == clusters[a]).collect();
        let mut outside: Vec<usize> = (0..n).filter(|&j| clusters[j] != clusters[a]).collect();
        for _ in 0..spec.distractors_per_anchor {
            let pick = rng.random_range(0..outside.len());
            pool.push(outside.swap_remove(pick));
        }
        pool.sort_unstable();
        for &j in &pool {
            labels.insert(ids[a].clone(), ids[j].clone(), u8::from(clusters[j] == clusters[a]))?;
        }
        candidate_sets.push(CandidateSet::new(
            ids[a].clone(),
            pool.into_iter().map(|j| ids[j].clone()).collect(),
        )?);
    }

    let prices: HashMap<ItemId, f64> = items.iter().cloned().collect();
    let mut transactions = TransactionTable::new(prices);
    for id in &ids {
        for t in 0..spec.transaction_buckets {
            transactions.insert(id.clone(), t, spec.transaction_count)?;
        }
    }

    Ok(SyntheticData {
        spec: spec.clone(),
        items,
        clusters,
        embeddings,
        interactions,
        candidate_sets,
        transactions,
        labels,
    })
}

/// File names written by [`write_synthetic`], relative to the output
/// directory.
pub const CATALOG_FILE: &str = "catalog.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const CANDIDATES_FILE: &str = "candidates.csv";
pub const TRANSACTIONS_FILE: &str = "transactions.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Metric cutoff used by manifests written for synthetic data.
pub const SYNTHETIC_K: usize = 4;

/// Lambda grid used by manifests written for synthetic data.
pub const SYNTHETIC_LAMBDAS: [f64; 6] = [0.0, 0.1, 0.25, 0.5, 0.8, 1.0];

/// Writes every dataset file plus a run manifest pointing at them.
pub fn write_synthetic(data: &SyntheticData, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    formats::write_catalog(&out.join(CATALOG_FILE), &data.items)?;
    formats::write_embeddings(&out.join(EMBEDDINGS_FILE), &data.embeddings)?;
    formats::write_interactions(&out.join(INTERACTIONS_FILE), &data.interactions)?;
    formats::write_candidates(&out.join(CANDIDATES_FILE), &data.candidate_sets)?;
    formats::write_transactions(&out.join(TRANSACTIONS_FILE), &data.transactions)?;
    formats::write_labels(&out.join(LABELS_FILE), &data.labels)?;
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        catalog: CATALOG_FILE.into(),
        embeddings: EMBEDDINGS_FILE.into(),
        interactions: INTERACTIONS_FILE.into(),
        candidates: CANDIDATES_FILE.into(),
        transactions: TRANSACTIONS_FILE.into(),
        labels: LABELS_FILE.into(),
        config: TrainConfig {
            seed: data.spec.seed,
            ..TrainConfig::default()
        },
        theta: 0.0,
        lambdas: SYNTHETIC_LAMBDAS
            .iter()
            .map(|&l| Lambda::new(l))
            .collect::<Result<_>>()?,
        k: SYNTHETIC_K,
        out_dir: "run".into(),
        price_seed: data.spec.seed,
        attach_cold: false,
    };
    let path = out.join(MANIFEST_FILE);
    manifest.save(&path)?;
    Ok(path)
}

/// Generates and writes in one step; returns the manifest path.
pub fn gen_synth(spec: &SyntheticSpec, out: &Path) -> Result<PathBuf> {
    write_synthetic(&generate(spec)?, out)
}

pub fn load_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SyntheticSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            embedding_dim: 8,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn default_spec_has_forty_items() {
        let data = generate(&small()).unwrap();
        assert_eq!(data.items.len(), 40);
        assert_eq!(data.embeddings.shape(), (40, 8));
        assert_eq!(data.candidate_sets.len(), 40);
        assert!(data.candidate_sets.iter().all(|s| s.candidates.len() == 19));
    }

    #[test]
    fn zero_noise_collapses_clusters() {
        let data = generate(&SyntheticSpec {
            noise_scale: 0.0,
            ..small()
        })
        .unwrap();
        for i in 0..40 {
            let first = data.clusters[i] * 20;
            assert_eq!(data.embeddings.row(i), data.embeddings.row(first));
        }
        assert_ne!(data.embeddings.row(0), data.embeddings.row(20));
    }

    #[test]
    fn complementary_pairs_have_negative_signal() {
        let data = generate(&small()).unwrap();
        for (u, v, c) in data.interactions.iter() {
            let (cu, cv) = (
                data.clusters[data.items.iter().position(|(id, _)| id == u).unwrap()],
                data.clusters[data.items.iter().position(|(id, _)| id == v).unwrap()],
            );
            if cu != cv {
                assert!(c.signal() < 0, "{u} {v} {c:?}");
            }
        }
    }

    #[test]
    fn prices_stay_in_band() {
        let spec = small();
        let data = generate(&spec).unwrap();
        for ((_, p), &c) in data.items.iter().zip(&data.clusters) {
            let b = spec.price_bands[c];
            assert!(b.low <= *p && *p <= b.high);
        }
    }

    #[test]
    fn distractors_are_irrelevant() {
        let data = generate(&SyntheticSpec {
            distractors_per_anchor: 3,
            ..small()
        })
        .unwrap();
        for set in &data.candidate_sets {
            assert_eq!(set.candidates.len(), 22);
            let zeros = data.labels.relevances_of(&set.anchor).iter().filter(|&&r| r == 0).count();
            assert_eq!(zeros, 3);
        }
    }

    #[test]
    fn validation() {
        for bad in [
            SyntheticSpec { cluster_count: 0, ..small() },
            SyntheticSpec { noise_scale: -1.0, ..small() },
            SyntheticSpec { complementary_pairs: vec![(0, 2)], ..small() },
            SyntheticSpec { version: 9, ..small() },
            SyntheticSpec { price_bands: vec![PriceBand { low: 3.0, high: 1.0 }], ..small() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
