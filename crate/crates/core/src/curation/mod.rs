//! Transfer-set selection strategies and crop-level gallery geometry.

mod assemble;
mod crop;
mod select;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use assemble::{append_queries, assemble_transfer_set, Origin, TransferEntry};
pub use crop::{crop_record, gallery_crops, sample_crop_rect, CropParams, CropSpec, CROPS_PER_IMAGE, CROP_OUT_SIZE, CROP_RATIO, CROP_SCALE};
pub use select::{best_matches_select, curate, query_balanced_select, random_select, smallest_k, union_size};

use crate::knn::{Metric, SearchOptions, DEFAULT_BLOCK_SIZE};
use crate::rng::GENERATOR_ID;
use crate::store::Embeddings;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    BestMatches,
    QueryBalanced,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Random => "random",
            Strategy::BestMatches => "best-matches",
            Strategy::QueryBalanced => "query-balanced",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "best-matches" => Ok(Strategy::BestMatches),
            "query-balanced" => Ok(Strategy::QueryBalanced),
            _ => Err(crate::Error::invalid(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationRequest {
    /// Number of gallery items to retrieve.
    pub n: usize,
    pub strategy: Strategy,
    pub metric: Metric,
    pub seed: u64,
    pub include_queries: bool,
    /// Never retrieve gallery items tagged `query` or `task-*`.
    pub exclude_task_items: bool,
    /// Never retrieve a gallery item whose id equals the query's id.
    pub exclude_self: bool,
    pub block_size: usize,
}

impl CurationRequest {
    pub fn new(n: usize, strategy: Strategy, metric: Metric, seed: u64) -> Self {
        CurationRequest {
            n,
            strategy,
            metric,
            seed,
            include_queries: true,
            exclude_task_items: true,
            exclude_self: false,
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }

    pub(crate) fn search_options(&self, gallery: &Embeddings<'_>) -> SearchOptions {
        let exclude: HashSet<u64> = if self.exclude_task_items {
            gallery
                .records()
                .iter()
                .filter(|r| r.is_task_item() || r.split_tag == "query")
                .map(|r| r.item_id)
                .collect()
        } else {
            HashSet::new()
        };
        SearchOptions {
            exclude,
            exclude_self: self.exclude_self,
        }
    }
}

/// Selected gallery items plus the provenance needed to audit the selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationResult {
    pub strategy: Strategy,
    pub metric: Metric,
    pub seed: u64,
    pub generator: String,
    /// Final neighbor depth (query-balanced only, else 0).
    pub k_final: usize,
    pub selected: Vec<u64>,
    /// query id -> `(item_id, rank)` pairs it contributed.
    pub attribution: BTreeMap<u64, Vec<(u64, u32)>>,
    /// `(query_id, item_id)` pairs removed at rank `k_final`.
    pub dropped: Vec<(u64, u64)>,
}

impl CurationResult {
    pub(crate) fn empty(req: &CurationRequest) -> Self {
        CurationResult {
            strategy: req.strategy,
            metric: req.metric,
            seed: req.seed,
            generator: GENERATOR_ID.to_owned(),
            k_final: 0,
            selected: Vec::new(),
            attribution: BTreeMap::new(),
            dropped: Vec::new(),
        }
    }
}
