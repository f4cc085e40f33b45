//! Run manifests, dataset ingestion, and the end-to-end sweep.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::formats;
use crate::graph::{attach_cold_items, build_edges, InteractionStats, ItemCatalog, ItemGraph, ItemId};
use crate::objective::Lambda;
use crate::ranking::{lambda_sweep, CandidateSet, RelevanceLabels, SweepInputs, SweepRun, TransactionTable};
use crate::training::TrainConfig;

pub const MANIFEST_VERSION: u32 = 1;

/// Inputs and settings for a sweep. Relative paths are resolved against
/// the directory holding the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: u32,
    pub catalog: PathBuf,
    pub embeddings: PathBuf,
    pub interactions: PathBuf,
    pub candidates: PathBuf,
    pub transactions: PathBuf,
    pub labels: PathBuf,
    pub config: TrainConfig,
    pub theta: f64,
    pub lambdas: Vec<Lambda>,
    pub k: usize,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub price_seed: u64,
    #[serde(default)]
    pub attach_cold: bool,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: RunManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in manifest.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn paths_mut(&mut self) -> [&mut PathBuf; 7] {
        [
            &mut self.catalog,
            &mut self.embeddings,
            &mut self.interactions,
            &mut self.candidates,
            &mut self.transactions,
            &mut self.labels,
            &mut self.out_dir,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: MANIFEST_VERSION,
            });
        }
        self.config.validate()?;
        if !self.theta.is_finite() {
            return Err(Error::invalid("theta", "must be finite"));
        }
        if self.lambdas.is_empty() {
            return Err(Error::invalid("lambdas", "at least one value is required"));
        }
        if self.k == 0 {
            return Err(Error::invalid("k", "must be at least 1"));
        }
        for p in [
            &self.catalog,
            &self.embeddings,
            &self.interactions,
            &self.candidates,
            &self.transactions,
            &self.labels,
        ] {
            if !p.is_file() {
                return Err(Error::invalid("manifest", format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Validated in-memory inputs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub catalog: ItemCatalog,
    pub interactions: InteractionStats,
    pub candidate_sets: Vec<CandidateSet>,
    pub transactions: TransactionTable,
    pub labels: RelevanceLabels,
}

fn check_known(catalog: &ItemCatalog, path: &Path, ids: impl IntoIterator<Item = ItemId>) -> Result<()> {
    for id in ids {
        if catalog.index_of(&id).is_none() {
            return Err(Error::invalid(
                "ingest",
                format!("{} references unknown item id `{id}`", path.display()),
            ));
        }
    }
    Ok(())
}

/// Reads and cross-checks every input file named by the manifest.
pub fn ingest(manifest: &RunManifest) -> Result<Dataset> {
    let catalog = formats::load_catalog(&manifest.catalog, &manifest.embeddings, manifest.price_seed)?;
    let interactions = formats::read_interactions(&manifest.interactions, &catalog)?;
    let candidate_sets = formats::read_candidates(&manifest.candidates)?;
    check_known(
        &catalog,
        &manifest.candidates,
        candidate_sets
            .iter()
            .flat_map(|s| std::iter::once(s.anchor.clone()).chain(s.candidates.iter().cloned())),
    )?;
    let prices: HashMap<ItemId, f64> = catalog.items().iter().map(|it| (it.id.clone(), it.raw_price)).collect();
    let transactions = formats::read_transactions(&manifest.transactions, prices)?;
    check_known(&catalog, &manifest.transactions, transactions.rows().into_iter().map(|(id, _, _)| id))?;
    let labels = formats::read_labels(&manifest.labels)?;
    check_known(
        &catalog,
        &manifest.labels,
        labels.rows().flat_map(|(a, c, _)| [a.clone(), c.clone()]).collect::<Vec<_>>(),
    )?;
    Ok(Dataset {
        catalog,
        interactions,
        candidate_sets,
        transactions,
        labels,
    })
}

/// Builds the similarity graph and optionally attaches every isolated item
/// to its nearest neighbor by initial embedding.
pub fn build_graph(
    stats: &InteractionStats,
    catalog: &ItemCatalog,
    theta: f64,
    attach_cold: bool,
) -> Result<ItemGraph> {
    let graph = build_edges(stats, catalog, theta)?;
    if !attach_cold {
        return Ok(graph);
    }
    let cold: BTreeSet<ItemId> = (0..graph.node_count())
        .filter(|&i| graph.degree(i) == 0)
        .map(|i| catalog.item(i).id.clone())
        .collect();
    if !cold.is_empty() {
        log::info!("attaching {} cold items", cold.len());
    }
    attach_cold_items(&graph, catalog, &cold)
}

/// Output file names inside the run directory.
pub const GRAPH_FILE: &str = "graph.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

pub fn lambda_tag(lambda: Lambda) -> String {
    format!("lambda_{}", lambda.value())
}

/// Ingests, builds the graph, runs the lambda sweep, and writes the graph,
/// one checkpoint, ranking file and training log per lambda, and the sweep
/// table into the manifest's output directory.
pub fn run_manifest(manifest: &RunManifest) -> Result<Vec<SweepRun>> {
    let data = ingest(manifest)?;
    let graph = build_graph(&data.interactions, &data.catalog, manifest.theta, manifest.attach_cold)?;
    log::info!(
        "graph: {} nodes, {} edges",
        graph.node_count(),
        graph.edge_count()
    );
    let out = &manifest.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    formats::write_edge_list(&out.join(GRAPH_FILE), &graph, &data.catalog, &data.interactions)?;
    let inputs = SweepInputs {
        graph: &graph,
        catalog: &data.catalog,
        candidate_sets: &data.candidate_sets,
        transactions: &data.transactions,
        labels: &data.labels,
    };
    let runs = lambda_sweep(inputs, &manifest.config, &manifest.lambdas, manifest.k)?;
    for run in &runs {
        let tag = lambda_tag(run.lambda);
        let config = TrainConfig {
            lambda: run.lambda,
            ..manifest.config.clone()
        };
        save_checkpoint(&run.outcome.params, &config, &out.join(format!("{tag}.ckpt")))?;
        formats::write_rankings(&out.join(format!("{tag}.rankings.csv")), &run.rankings)?;
        formats::write_run_log(
            &out.join(format!("{tag}.log.csv")),
            &run.outcome.history,
            &run.outcome.epoch_ms,
        )?;
    }
    formats::write_sweep_table(&out.join(SWEEP_FILE), &runs)?;
    Ok(runs)
}
