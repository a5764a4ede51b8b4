//! The staged curation pipeline behind the CLI:
//! `curate` → `hygiene` → (human review) → `finalize`.
//!
//! Every stage writes one JSON document whose `digests.content` covers its
//! semantic fields, and records the digests of the stores and upstream
//! documents it consumed. A stage refuses inputs whose digests no longer match.

mod commands;
mod config;
mod manifest;

pub use commands::{
    build_store, plan_crops, run_curate, run_finalize, run_hygiene, stats, validate_store, BuildStoreOptions, Stats,
    StoreSummary,
};
pub use config::{PipelineConfig, RuntimeConfig, StoreConfig, StorePaths};
pub use manifest::{
    content_digest_of, file_digest, read_json, read_manifest, store_digest, write_json, CurationCounts, CurationManifest,
    DedupSummary, Digests, HygieneCounts, HygieneManifest, Manifest, OutputLock, RunCounts, RunManifest, Timestamps,
    CURATION_FILE, FINAL_FILE, HYGIENE_FILE, REPORT_FILE, SCHEMA,
};
