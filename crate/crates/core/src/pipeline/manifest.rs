//! Manifest documents written by each stage, their content digests, and the
//! output-directory lock.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::curation::{Strategy, TransferEntry};
use crate::error::{Error, Result};
use crate::hygiene::{Cluster, ConfirmationSummary, ContaminationReport, DuplicatePair};
use crate::knn::Metric;
use crate::store::metadata_path;

use super::config::{PipelineConfig, StorePaths};

pub const SCHEMA: u32 = 1;

pub const CURATION_FILE: &str = "curation.json";
pub const HYGIENE_FILE: &str = "hygiene.json";
pub const REPORT_FILE: &str = "contamination.json";
pub const FINAL_FILE: &str = "final.json";
const LOCK_FILE: &str = ".transfer-curate.lock";

fn hex_digest(h: Sha256) -> String {
    format!("sha256:{}", hex::encode(h.finalize()))
}

fn hash_file(h: &mut Sha256, path: &Path) -> Result<()> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    h.update(len.to_le_bytes());
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(())
}

pub fn file_digest(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    hash_file(&mut h, path)?;
    Ok(hex_digest(h))
}

/// Digest over every store file of `paths` and their metadata sidecars.
pub fn store_digest(paths: &StorePaths) -> Result<String> {
    let mut h = Sha256::new();
    for f in paths.files() {
        hash_file(&mut h, f)?;
        hash_file(&mut h, &metadata_path(f))?;
    }
    Ok(hex_digest(h))
}

/// Digest of a manifest's semantic content: everything except timestamps,
/// the digest itself, store paths, and runtime knobs. Object keys are
/// serialized in sorted order.
pub fn content_digest_of(value: &Value) -> Result<String> {
    let mut v = value.clone();
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timestamps");
        if let Some(d) = obj.get_mut("digests").and_then(Value::as_object_mut) {
            d.remove("content");
        }
        if let Some(c) = obj.get_mut("config").and_then(Value::as_object_mut) {
            c.remove("stores");
            c.remove("runtime");
        }
    }
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&v)?);
    Ok(hex_digest(h))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Digests {
    /// Store role -> digest of the store files it was read from.
    pub inputs: BTreeMap<String, String>,
    /// Earlier stage documents this one was derived from.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stages: BTreeMap<String, String>,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started: String,
    pub finished: String,
}

impl Timestamps {
    pub fn now() -> String {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }
}

/// Anything stored as a stage document with `digests.content`.
pub trait Manifest: Serialize + DeserializeOwned {
    const STAGE: &'static str;

    fn digests_mut(&mut self) -> &mut Digests;
    fn digests(&self) -> &Digests;

    /// Fills `digests.content` from the current fields.
    fn seal(&mut self) -> Result<()> {
        let digest = content_digest_of(&serde_json::to_value(&*self)?)?;
        self.digests_mut().content = digest;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationCounts {
    pub queries: usize,
    pub gallery: usize,
    pub retrieved: usize,
}

/// Output of `curate`: the selected gallery items with full attribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationManifest {
    pub schema: u32,
    pub stage: String,
    pub config: PipelineConfig,
    pub strategy: Strategy,
    pub metric: Metric,
    pub seed: u64,
    pub generator: String,
    pub k_final: usize,
    pub selected: Vec<u64>,
    pub attribution: BTreeMap<u64, Vec<(u64, u32)>>,
    pub dropped: Vec<(u64, u64)>,
    pub digests: Digests,
    pub counts: CurationCounts,
    pub timestamps: Timestamps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DedupSummary {
    pub threshold: f64,
    pub prefilter: bool,
    pub pairs: Vec<DuplicatePair>,
    /// Clusters with more than one member; all other originals are singletons.
    pub clusters: Vec<Cluster>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HygieneCounts {
    pub retrieved: usize,
    pub unique_originals: usize,
    pub duplicate_pairs: usize,
    pub duplicate_clusters: usize,
    pub duplicate_images_removed: usize,
    pub removed_by_dedup: usize,
    pub flagged: usize,
}

/// Output of `hygiene`: the de-duplicated retrieved entries and the
/// contamination report awaiting review.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HygieneManifest {
    pub schema: u32,
    pub stage: String,
    pub config: PipelineConfig,
    pub k_final: usize,
    pub dedup: DedupSummary,
    pub retained: Vec<TransferEntry>,
    pub contamination: ContaminationReport,
    pub counts: HygieneCounts,
    pub digests: Digests,
    pub timestamps: Timestamps,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub retrieved: usize,
    pub duplicate_clusters: usize,
    pub removed_by_dedup: usize,
    pub flagged: usize,
    pub removed_by_confirmation: usize,
    pub queries: usize,
    pub query_overlaps: usize,
    pub final_size: usize,
}

impl RunCounts {
    /// `final = retrieved − dedup − confirmed + (queries − overlaps if included)`.
    pub fn identity_holds(&self, include_queries: bool) -> bool {
        let added = if include_queries { self.queries - self.query_overlaps } else { 0 };
        self.retrieved + added == self.final_size + self.removed_by_dedup + self.removed_by_confirmation
    }
}

/// Output of `finalize`: the transfer set and the audit trail of every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub stage: String,
    pub config: PipelineConfig,
    pub strategy: Strategy,
    pub metric: Metric,
    pub seed: u64,
    pub generator: String,
    pub k_final: usize,
    pub transfer_set: Vec<TransferEntry>,
    pub confirmations: ConfirmationSummary,
    pub counts: RunCounts,
    pub digests: Digests,
    pub timestamps: Timestamps,
}

macro_rules! impl_manifest {
    ($t:ty, $stage:literal) => {
        impl Manifest for $t {
            const STAGE: &'static str = $stage;

            fn digests_mut(&mut self) -> &mut Digests {
                &mut self.digests
            }

            fn digests(&self) -> &Digests {
                &self.digests
            }
        }
    };
}

impl_manifest!(CurationManifest, "curation");
impl_manifest!(HygieneManifest, "hygiene");
impl_manifest!(RunManifest, "final");

/// Writes pretty JSON via a temporary file and rename.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads a stage document and refuses it unless its recorded content digest
/// matches its content.
pub fn read_manifest<M: Manifest>(path: &Path) -> Result<M> {
    let value: Value = read_json(path)?;
    let stage = value.get("stage").and_then(Value::as_str).unwrap_or_default();
    if stage != M::STAGE {
        return Err(Error::invalid(format!(
            "{} is a {stage:?} document, expected {:?}",
            path.display(),
            M::STAGE
        )));
    }
    let recorded = value
        .pointer("/digests/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_owned();
    let computed = content_digest_of(&value)?;
    if recorded != computed {
        return Err(Error::DigestMismatch {
            what: path.display().to_string(),
            recorded,
            computed,
        });
    }
    Ok(serde_json::from_value(value)?)
}

/// Re-hashes a store and compares it with the digest recorded upstream.
pub fn verify_store(role: &str, paths: &StorePaths, recorded: &BTreeMap<String, String>) -> Result<()> {
    let expected = recorded
        .get(role)
        .ok_or_else(|| Error::invalid(format!("manifest records no digest for the {role} store")))?;
    let computed = store_digest(paths)?;
    if &computed != expected {
        return Err(Error::DigestMismatch {
            what: format!("{role} store"),
            recorded: expected.clone(),
            computed,
        });
    }
    Ok(())
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_owned())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
