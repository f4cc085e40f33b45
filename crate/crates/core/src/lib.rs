//! Price-aware item similarity with graph neural networks.
//!
//! Items become nodes of a similarity graph built from co-view,
//! view-then-buy and co-purchase counts. A GCN or GAT encoder turns initial
//! text embeddings into node embeddings, trained for link prediction with a
//! decoder that inflates the score of expensive pairs by a factor
//! `1 + lambda * (p_u + p_v)`. Candidates are ranked by the same
//! price-weighted cosine and evaluated with NDCG@K and expected GMV@K.

pub mod checkpoint;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod formats;
pub mod graph;
pub mod matrix;
pub mod objective;
pub mod pipeline;
pub mod ranking;
pub mod synth;
pub mod training;

pub use encoder::{encode, EmbeddingMatrix, ModelKind, ModelParams};
pub use error::{Error, Result};
pub use graph::{InteractionCounts, InteractionStats, ItemCatalog, ItemGraph, ItemId};
pub use matrix::Matrix;
pub use objective::{Lambda, LossKind};
pub use training::{train, TrainConfig, TrainOutcome};
