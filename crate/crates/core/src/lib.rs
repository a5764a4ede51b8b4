//! Curation of retrieval-augmented transfer sets from precomputed embedding
//! stores, plus f64 reference kernels (with analytic gradients) for the
//! losses used to distill into a student on those sets.
//!
//! Modules, bottom up:
//! - [`store`]: the binary feature store and its JSONL provenance sidecar.
//! - [`knn`]: exact, deterministic top-k search.
//! - [`curation`]: random, best-matches and query-balanced selection, crop geometry.
//! - [`hygiene`]: duplicate clustering and contamination flagging.
//! - [`losses`]: distillation / finetuning losses with gradient checks.
//! - [`pipeline`]: configuration, manifests and the CLI stages.

pub mod curation;
pub mod error;
pub mod fixture;
pub mod hygiene;
pub mod knn;
pub mod losses;
pub mod pipeline;
pub mod rng;
pub mod store;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use knn::{Metric, Neighbor, RankList, SearchOptions};
pub use store::{open_store, write_store, DualStore, EmbeddingStore, Embeddings, ItemRecord, StoreSet};
