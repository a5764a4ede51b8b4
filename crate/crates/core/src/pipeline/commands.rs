use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::curation::{append_queries, curate, gallery_crops, CropSpec, Origin, Strategy, TransferEntry};
use crate::error::{Error, Result};
use crate::hygiene::{
    apply_confirmations, cluster_duplicates, dedup_retain, find_duplicate_pairs, flag_contamination, ContaminationReport,
    DedupOptions,
};
use crate::store::{normalize_rows, read_metadata, EmbeddingStore, ItemRecord, StoreSet};

use super::config::{PipelineConfig, StorePaths};
use super::manifest::*;

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start {n} worker threads: {e}")))?
            .install(f),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StoreSummary {
    pub count: usize,
    pub dim: usize,
    pub normalized: bool,
    pub encoder_id: String,
    pub norm_min: f64,
    pub norm_mean: f64,
    pub norm_max: f64,
}

impl StoreSummary {
    pub fn of(store: &EmbeddingStore) -> Self {
        let norms: Vec<f64> = (0..store.count())
            .map(|i| store.row(i).iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt())
            .collect();
        let (min, max) = norms
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &n| (lo.min(n), hi.max(n)));
        let mean = if norms.is_empty() { 0.0 } else { norms.iter().sum::<f64>() / norms.len() as f64 };
        StoreSummary {
            count: store.count(),
            dim: store.dim(),
            normalized: store.is_normalized(),
            encoder_id: store.encoder_id().to_owned(),
            norm_min: if norms.is_empty() { 0.0 } else { min },
            norm_mean: mean,
            norm_max: if norms.is_empty() { 0.0 } else { max },
        }
    }
}

#[derive(Clone, Debug)]
pub struct BuildStoreOptions {
    /// Headerless CSV, one vector per row.
    pub csv: PathBuf,
    /// JSONL item records; generated whole-image records when absent.
    pub meta: Option<PathBuf>,
    pub out: PathBuf,
    pub encoder_id: String,
    pub normalize: bool,
    /// Split tag for generated records.
    pub split_tag: String,
}

/// Converts a CSV of vectors (and optional metadata) into a store.
pub fn build_store(opts: &BuildStoreOptions) -> Result<StoreSummary> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(&opts.csv)
        .map_err(|e| Error::invalid(format!("{}: {e}", opts.csv.display())))?;
    let mut matrix = Vec::new();
    let mut dim = None;
    let mut rows = 0usize;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::invalid(format!("{}: row {row}: {e}", opts.csv.display())))?;
        let d = *dim.get_or_insert(rec.len());
        if rec.len() != d {
            return Err(Error::invalid(format!("ragged input: row {row} has {} values, expected {d}", rec.len())));
        }
        for (col, field) in rec.iter().enumerate() {
            let v: f32 = field
                .parse()
                .map_err(|_| Error::invalid(format!("row {row}, column {col}: cannot parse {field:?} as a number")))?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col });
            }
            matrix.push(v);
        }
        rows += 1;
    }
    let dim = dim.ok_or_else(|| Error::invalid(format!("{} has no rows", opts.csv.display())))?;

    let records = match &opts.meta {
        Some(p) => read_metadata(p)?,
        None => (0..rows)
            .map(|i| ItemRecord::whole_image(i as u64, format!("row-{i}"), opts.split_tag.clone()))
            .collect(),
    };
    let mut store = EmbeddingStore::from_parts(records, matrix, dim, false, opts.encoder_id.clone())?;
    if opts.normalize {
        store = normalize_rows(&store)?;
    }
    store.write(&opts.out)?;
    Ok(StoreSummary::of(&store))
}

/// Opens (and thereby fully validates) a single or dual store.
pub fn validate_store(paths: &StorePaths) -> Result<Vec<StoreSummary>> {
    Ok(match paths.open()? {
        StoreSet::Single(s) => vec![StoreSummary::of(&s)],
        StoreSet::Dual(d) => vec![StoreSummary::of(d.a()), StoreSummary::of(d.b())],
    })
}

fn input_digests(cfg: &PipelineConfig) -> Result<BTreeMap<String, String>> {
    cfg.stores
        .roles()
        .map(|(role, p)| Ok((role.to_owned(), store_digest(p)?)))
        .collect()
}

/// Runs the configured selection strategy and writes `curation.json` into `out_dir`.
pub fn run_curate(cfg: &PipelineConfig, out_dir: &Path) -> Result<CurationManifest> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(out_dir)?;
    let started = Timestamps::now();

    let gallery = cfg.stores.require("gallery")?.open()?;
    let queries = match (&cfg.stores.query, cfg.strategy) {
        (Some(q), _) => Some(q.open()?),
        (None, Strategy::Random) => None,
        (None, _) => return Err(Error::invalid("config has no query store")),
    };
    let req = cfg.request();
    let result = with_threads(cfg.runtime.threads, || {
        let q = queries.as_ref().map(StoreSet::view).unwrap_or(gallery.view());
        curate(q, gallery.view(), &req)
    })?;
    log::info!("{} selected {} items (k_final {})", cfg.strategy, result.selected.len(), result.k_final);

    let mut manifest = CurationManifest {
        schema: SCHEMA,
        stage: "curation".into(),
        config: cfg.clone(),
        strategy: result.strategy,
        metric: result.metric,
        seed: result.seed,
        generator: result.generator,
        k_final: result.k_final,
        counts: CurationCounts {
            queries: queries.as_ref().map_or(0, |q| q.view().count()),
            gallery: gallery.view().count(),
            retrieved: result.selected.len(),
        },
        selected: result.selected,
        attribution: result.attribution,
        dropped: result.dropped,
        digests: Digests {
            inputs: input_digests(cfg)?,
            ..Digests::default()
        },
        timestamps: Timestamps {
            started,
            finished: Timestamps::now(),
        },
    };
    manifest.seal()?;
    write_json(&out_dir.join(CURATION_FILE), &manifest)?;
    Ok(manifest)
}

/// Rows of `originals` holding each listed source image, ascending.
fn original_rows(originals: &StoreSet, sources: &[String]) -> Result<Vec<usize>> {
    let mut first: HashMap<&str, usize> = HashMap::new();
    for (i, r) in originals.view().records().iter().enumerate() {
        first.entry(r.source_image_id.as_str()).or_insert(i);
    }
    let mut rows = sources
        .iter()
        .map(|s| {
            first
                .get(s.as_str())
                .copied()
                .ok_or_else(|| Error::UnknownId(format!("source image {s} has no original features")))
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_unstable();
    rows.dedup();
    Ok(rows)
}

fn unique_sources(entries: &[TransferEntry]) -> Vec<String> {
    let mut seen = HashSet::new();
    entries
        .iter()
        .filter(|e| seen.insert(e.source_image_id.as_str()))
        .map(|e| e.source_image_id.clone())
        .collect()
}

/// De-duplicates the retrieved set of a curation manifest and flags possible
/// task-set leaks; writes `hygiene.json` and the review file `contamination.json`.
pub fn run_hygiene(manifest_path: &Path, out_dir: &Path) -> Result<HygieneManifest> {
    let cur: CurationManifest = read_manifest(manifest_path)?;
    let cfg = cur.config.clone();
    let _lock = OutputLock::acquire(out_dir)?;
    let started = Timestamps::now();

    let gallery_paths = cfg.stores.require("gallery")?;
    let task_paths = cfg.stores.require("task")?;
    let originals_paths = cfg.stores.originals.as_ref().unwrap_or(gallery_paths);
    verify_store("gallery", gallery_paths, &cur.digests.inputs)?;
    verify_store("task", task_paths, &cur.digests.inputs)?;
    if cfg.stores.originals.is_some() {
        verify_store("originals", originals_paths, &cur.digests.inputs)?;
    }

    let gallery = gallery_paths.open()?;
    let view = gallery.view();
    let entries = cur
        .selected
        .iter()
        .map(|&id| {
            view.position_of(id)
                .map(|r| TransferEntry::from_record(&view.records()[r], Origin::Retrieved))
                .ok_or_else(|| Error::UnknownId(format!("selected item {id} is not in the gallery")))
        })
        .collect::<Result<Vec<_>>>()?;
    drop(gallery);

    let originals = originals_paths.open()?;
    let task = task_paths.open()?;
    let universe = unique_sources(&entries);

    let (pairs, clusters, retained, report) = with_threads(cfg.runtime.threads, || {
        let subset = originals.select_rows(&original_rows(&originals, &universe)?)?;
        let opts = DedupOptions {
            threshold: cfg.dedup_threshold,
            prefilter: cfg.dedup_prefilter,
        };
        let pairs = find_duplicate_pairs(subset.view(), &opts)?;
        let clusters = cluster_duplicates(&pairs, &universe)?;
        let retained = dedup_retain(&entries, &clusters)?;

        let survivors = originals.select_rows(&original_rows(&originals, &unique_sources(&retained))?)?;
        let report = flag_contamination(survivors.view(), task.view(), cfg.decontam_threshold, cfg.evidence_k)?;
        Ok((pairs, clusters, retained, report))
    })?;

    let counts = HygieneCounts {
        retrieved: entries.len(),
        unique_originals: universe.len(),
        duplicate_pairs: pairs.len(),
        duplicate_clusters: clusters.clusters.iter().filter(|c| c.members.len() > 1).count(),
        duplicate_images_removed: clusters.removed_count(),
        removed_by_dedup: entries.len() - retained.len(),
        flagged: report.flagged.len(),
    };
    log::info!(
        "dedup removed {} entries ({} images in {} clusters); {} images flagged for review",
        counts.removed_by_dedup,
        counts.duplicate_images_removed,
        counts.duplicate_clusters,
        counts.flagged
    );

    let mut manifest = HygieneManifest {
        schema: SCHEMA,
        stage: "hygiene".into(),
        config: cfg,
        k_final: cur.k_final,
        dedup: DedupSummary {
            threshold: cur.config.dedup_threshold,
            prefilter: cur.config.dedup_prefilter,
            pairs,
            clusters: clusters.clusters.into_iter().filter(|c| c.members.len() > 1).collect(),
        },
        retained,
        contamination: report,
        counts,
        digests: Digests {
            inputs: cur.digests.inputs.clone(),
            stages: BTreeMap::from([("curation".to_owned(), cur.digests.content.clone())]),
            content: String::new(),
        },
        timestamps: Timestamps {
            started,
            finished: Timestamps::now(),
        },
    };
    manifest.seal()?;
    write_json(&out_dir.join(HYGIENE_FILE), &manifest)?;
    write_json(&out_dir.join(REPORT_FILE), &manifest.contamination)?;
    Ok(manifest)
}

/// Applies reviewed contamination statuses, appends the queries, and writes
/// the final `final.json` run manifest.
pub fn run_finalize(hygiene_path: &Path, confirmations: &Path, out_dir: &Path) -> Result<RunManifest> {
    let h: HygieneManifest = read_manifest(hygiene_path)?;
    let reviewed: ContaminationReport = read_json(confirmations)?;
    if reviewed.schema != h.contamination.schema {
        return Err(Error::invalid(format!("confirmation file has schema {}", reviewed.schema)));
    }
    let _lock = OutputLock::acquire(out_dir)?;
    let started = Timestamps::now();
    let cfg = h.config.clone();

    let (kept, summary) = apply_confirmations(&h.contamination, &reviewed, &h.retained)?;
    let after_review = kept.len();
    let (transfer_set, queries) = if cfg.include_queries {
        let qp = cfg.stores.require("query")?;
        verify_store("query", qp, &h.digests.inputs)?;
        let q = qp.open()?;
        let records = q.view().records();
        (append_queries(records, kept)?, records.len())
    } else {
        (kept, 0)
    };

    let counts = RunCounts {
        retrieved: h.counts.retrieved,
        duplicate_clusters: h.counts.duplicate_clusters,
        removed_by_dedup: h.counts.removed_by_dedup,
        flagged: h.counts.flagged,
        removed_by_confirmation: summary.removed_entries,
        queries,
        query_overlaps: queries + after_review - transfer_set.len(),
        final_size: transfer_set.len(),
    };
    debug_assert!(counts.identity_holds(cfg.include_queries));

    let mut stages = h.digests.stages.clone();
    stages.insert("hygiene".into(), h.digests.content.clone());
    stages.insert("confirmations".into(), file_digest(confirmations)?);
    let cur_digest = h.digests.stages.get("curation").cloned().unwrap_or_default();
    log::info!("final transfer set has {} entries (curation {cur_digest})", counts.final_size);

    let mut manifest = RunManifest {
        schema: SCHEMA,
        stage: "final".into(),
        strategy: cfg.strategy,
        metric: cfg.metric,
        seed: cfg.seed,
        generator: cfg.generator.clone(),
        config: cfg,
        k_final: h.k_final,
        transfer_set,
        confirmations: summary,
        counts,
        digests: Digests {
            inputs: h.digests.inputs.clone(),
            stages,
            content: String::new(),
        },
        timestamps: Timestamps {
            started,
            finished: Timestamps::now(),
        },
    };
    manifest.seal()?;
    write_json(&out_dir.join(FINAL_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub strategy: Strategy,
    pub k_final: usize,
    pub selected: usize,
    /// Query id -> number of selected items attributed to it.
    pub per_query: BTreeMap<u64, usize>,
    /// Attribution count -> number of queries with that count.
    pub attribution_histogram: BTreeMap<usize, usize>,
    /// Rank -> number of attributions at that rank.
    pub rank_distribution: BTreeMap<u32, usize>,
    pub dropped: usize,
    /// Cluster size -> number of duplicate clusters (needs a hygiene manifest).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_sizes: Option<BTreeMap<usize, usize>>,
}

/// Summaries of a curation manifest, optionally with its hygiene stage.
pub fn stats(curation: &Path, hygiene: Option<&Path>) -> Result<Stats> {
    let cur: CurationManifest = read_manifest(curation)?;
    let per_query: BTreeMap<u64, usize> = cur.attribution.iter().map(|(&q, v)| (q, v.len())).collect();
    let mut attribution_histogram = BTreeMap::new();
    for &n in per_query.values() {
        *attribution_histogram.entry(n).or_insert(0) += 1;
    }
    let mut rank_distribution = BTreeMap::new();
    for &(_, rank) in cur.attribution.values().flatten() {
        *rank_distribution.entry(rank).or_insert(0) += 1;
    }
    let cluster_sizes = match hygiene {
        None => None,
        Some(p) => {
            let h: HygieneManifest = read_manifest(p)?;
            if h.digests.stages.get("curation") != Some(&cur.digests.content) {
                return Err(Error::invalid("hygiene manifest was not derived from this curation manifest"));
            }
            let mut sizes = BTreeMap::new();
            let mut in_clusters = 0;
            for c in &h.dedup.clusters {
                *sizes.entry(c.members.len()).or_insert(0) += 1;
                in_clusters += c.members.len();
            }
            let singletons = h.counts.unique_originals - in_clusters;
            if singletons > 0 {
                sizes.insert(1, singletons);
            }
            Some(sizes)
        }
    };
    Ok(Stats {
        strategy: cur.strategy,
        k_final: cur.k_final,
        selected: cur.selected.len(),
        per_query,
        attribution_histogram,
        rank_distribution,
        dropped: cur.dropped.len(),
        cluster_sizes,
    })
}

/// Crop rectangles for each `(source_image_id, width, height)` under the
/// configured crop parameters.
pub fn plan_crops(cfg: &PipelineConfig, images: &[(String, u32, u32)]) -> Result<Vec<CropSpec>> {
    cfg.crop.validate()?;
    let mut out = Vec::with_capacity(images.len() * cfg.crop.crops_per_image as usize);
    for (id, w, h) in images {
        out.extend(gallery_crops(id, *w, *h, &cfg.crop, cfg.seed)?);
    }
    Ok(out)
}
