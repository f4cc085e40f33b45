//! Command-line surface.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::encoder::{encode, ModelKind};
use crate::error::{Error, Result};
use crate::formats;
use crate::graph::ItemId;
use crate::objective::{Lambda, LossKind, DEFAULT_MARGIN};
use crate::pipeline::{build_graph, run_manifest, RunManifest};
use crate::ranking::{evaluate_rankings, rank_all, AnchorRanking};
use crate::synth::{gen_synth, load_spec, SyntheticSpec};
use crate::training::{held_out_accuracy, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "gmvo", version, about = "Price-aware similar item recommendation with graph neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the similarity graph from pair interaction counts.
    BuildGraph(BuildGraphArgs),
    /// Train an encoder and write a checkpoint.
    Train(TrainArgs),
    /// Encode every item with a trained checkpoint.
    Infer(InferArgs),
    /// Rank candidate sets with the price-weighted cosine.
    Rank(RankArgs),
    /// Compute NDCG@K and EGMV@K for a rankings file.
    Eval(EvalArgs),
    /// Run a lambda sweep described by a manifest.
    Sweep(SweepArgs),
    /// Write a synthetic benchmark and its manifest.
    GenSynth(GenSynthArgs),
}

#[derive(Debug, Args)]
pub struct CatalogArgs {
    #[arg(long)]
    pub catalog: PathBuf,
    /// Seed for imputing missing prices.
    #[arg(long, default_value_t = 0)]
    pub price_seed: u64,
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    #[arg(long)]
    pub interactions: PathBuf,
    #[command(flatten)]
    pub catalog: CatalogArgs,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub theta: f64,
    /// Attach every isolated item to its nearest neighbor by initial
    /// embedding (requires --embeddings).
    #[arg(long, requires = "embeddings")]
    pub attach_cold: bool,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[command(flatten)]
    pub catalog: CatalogArgs,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value = "gcn")]
    pub model: ModelKind,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value = "bce")]
    pub loss: LossKind,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    pub margin: f64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub hops: usize,
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.9)]
    pub train_fraction: f64,
    /// Optional per-epoch loss log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    #[command(flatten)]
    pub catalog: CatalogArgs,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub z: PathBuf,
    #[command(flatten)]
    pub catalog: CatalogArgs,
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub rankings: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub transactions: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Supplies item prices.
    #[command(flatten)]
    pub catalog: CatalogArgs,
    /// Candidate pools; defaults to the labeled candidates of each anchor.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// JSON spec; the default spec is used when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 1 for usage or validation errors, 2 for runtime failures.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildGraph(a) => build_graph_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Rank(a) => rank_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::GenSynth(a) => gen_synth_cmd(a),
    }
}

fn build_graph_cmd(a: BuildGraphArgs) -> Result<()> {
    let catalog = match &a.embeddings {
        Some(emb) => formats::load_catalog(&a.catalog.catalog, emb, a.catalog.price_seed)?,
        None => formats::load_catalog_ids(&a.catalog.catalog, a.catalog.price_seed)?,
    };
    let stats = formats::read_interactions(&a.interactions, &catalog)?;
    let graph = build_graph(&stats, &catalog, a.theta, a.attach_cold)?;
    formats::write_edge_list(&a.out, &graph, &catalog, &stats)?;
    println!("{} nodes, {} edges", graph.node_count(), graph.edge_count());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        model_kind: a.model,
        hops: a.hops,
        output_dim: a.dim,
        learning_rate: a.lr,
        epochs: a.epochs,
        lambda: Lambda::new(a.lambda)?,
        loss_kind: a.loss,
        margin: a.margin,
        seed: a.seed,
        train_fraction: a.train_fraction,
    };
    config.validate()?;
    let catalog = formats::load_catalog(&a.catalog.catalog, &a.embeddings, a.catalog.price_seed)?;
    let graph = formats::read_edge_list(&a.graph, &catalog)?;
    let outcome = train(&graph, &catalog, &config)?;
    save_checkpoint(&outcome.params, &config, &a.out)?;
    if let Some(log) = &a.log {
        formats::write_run_log(log, &outcome.history, &outcome.epoch_ms)?;
    }
    let acc = held_out_accuracy(&outcome, &graph, &catalog, &config)?;
    println!(
        "loss {:.6} -> {:.6}, held-out accuracy {acc:.4}",
        outcome.history.first().copied().unwrap_or(f64::NAN),
        outcome.history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let (params, _) = load_checkpoint(&a.checkpoint)?;
    let catalog = formats::load_catalog(&a.catalog.catalog, &a.embeddings, a.catalog.price_seed)?;
    let graph = formats::read_edge_list(&a.graph, &catalog)?;
    let z = encode(&graph, catalog.embeddings(), &params)?;
    formats::write_embeddings(&a.out, z.matrix())
}

fn rank_cmd(a: RankArgs) -> Result<()> {
    let z = formats::read_embeddings(&a.z)?;
    let catalog = formats::load_catalog_ids(&a.catalog.catalog, a.catalog.price_seed)?;
    if z.rows() != catalog.len() {
        return Err(Error::RowCountMismatch {
            embedding_rows: z.rows(),
            catalog_rows: catalog.len(),
        });
    }
    let sets = formats::read_candidates(&a.candidates)?;
    let rankings = rank_all(&sets, &catalog, &z, Lambda::new(a.lambda)?, a.k)?;
    formats::write_rankings(&a.out, &rankings)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let catalog = formats::load_catalog_ids(&a.catalog.catalog, a.catalog.price_seed)?;
    let prices: HashMap<ItemId, f64> = catalog.items().iter().map(|it| (it.id.clone(), it.raw_price)).collect();
    let tx = formats::read_transactions(&a.transactions, prices)?;
    let labels = formats::read_labels(&a.labels)?;
    let mut pools: HashMap<ItemId, Vec<ItemId>> = match &a.candidates {
        Some(path) => formats::read_candidates(path)?
            .into_iter()
            .map(|s| (s.anchor, s.candidates))
            .collect(),
        None => HashMap::new(),
    };
    let rankings: Vec<AnchorRanking> = formats::read_rankings(&a.rankings)?
        .into_iter()
        .map(|mut r| {
            r.pool = pools
                .remove(&r.anchor)
                .unwrap_or_else(|| labels.candidates_of(&r.anchor));
            r
        })
        .collect();
    let m = evaluate_rankings(&rankings, &labels, &tx, a.k)?;
    println!("anchors\t{}", m.anchors);
    println!("ndcg@{}\t{:.6}", a.k, m.ndcg);
    println!("egmv@{}\t{:.6}", a.k, m.egmv);
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let manifest = RunManifest::load(&a.manifest)?;
    let runs = run_manifest(&manifest)?;
    print!("{}", formats::format_sweep_table(&runs, manifest.k));
    Ok(())
}

fn gen_synth_cmd(a: GenSynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(path) => load_spec(path)?,
        None => SyntheticSpec::default(),
    };
    let manifest = gen_synth(&spec, &a.out)?;
    println!("wrote {}", manifest.display());
    Ok(())
}
