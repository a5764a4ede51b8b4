use std::collections::{BTreeSet, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::Embeddings;

use super::{check_same_shape, encoder_sims, require_normalized, unique_originals, SourceImage};

/// Retrieved originals more similar than this to any task image are possible leaks.
pub const DECONTAM_THRESHOLD: f64 = 0.95;

/// Nearest task images attached to each flag for human review.
pub const EVIDENCE_K: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReviewStatus {
    Pending,
    ConfirmedLeak,
    Cleared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub item_id: u64,
    pub source_image_id: String,
    pub split_tag: String,
    pub sim_a: f64,
    pub sim_b: Option<f64>,
    /// `max(sim_a, sim_b)`.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedItem {
    pub source_image_id: String,
    pub max_similarity: f64,
    pub status: ReviewStatus,
    pub evidence: Vec<Evidence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub schema: u32,
    pub threshold: f64,
    pub evidence_k: usize,
    pub encoders: Vec<String>,
    /// Split tags present in the task set that was scanned.
    pub task_splits: Vec<String>,
    pub retrieved_originals: usize,
    pub flagged: Vec<FlaggedItem>,
}

impl ContaminationReport {
    pub fn pending(&self) -> usize {
        self.flagged.iter().filter(|f| f.status == ReviewStatus::Pending).count()
    }

    pub fn confirmed_leaks(&self) -> impl Iterator<Item = &str> {
        self.flagged
            .iter()
            .filter(|f| f.status == ReviewStatus::ConfirmedLeak)
            .map(|f| f.source_image_id.as_str())
    }
}

fn encoder_names(e: &Embeddings<'_>) -> Vec<String> {
    match e {
        Embeddings::Single(s) => vec![s.encoder_id().to_owned()],
        Embeddings::Dual(d) => vec![d.a().encoder_id().to_owned(), d.b().encoder_id().to_owned()],
    }
}

/// Flags every unique retrieved original whose best per-pair score
/// `max(cos_a, cos_b)` against the task set strictly exceeds `threshold`,
/// with its `min(evidence_k, |S|)` nearest task images as evidence.
pub fn flag_contamination(
    retrieved: Embeddings<'_>,
    task: Embeddings<'_>,
    threshold: f64,
    evidence_k: usize,
) -> Result<ContaminationReport> {
    if task.count() == 0 {
        return Err(Error::invalid("task set is empty"));
    }
    require_normalized(&retrieved, "retrieved originals")?;
    require_normalized(&task, "task")?;
    check_same_shape(&retrieved, &task)?;

    let rows = unique_originals(retrieved);
    let take = evidence_k.min(task.count());
    let task_records = task.records();

    let flagged: Vec<FlaggedItem> = rows
        .par_iter()
        .filter_map(|&r| {
            let mut scored: Vec<(f64, f64, Option<f64>, usize)> = (0..task.count())
                .map(|s| {
                    let (a, b) = encoder_sims(&retrieved, r, &task, s);
                    (b.map_or(a, |b| a.max(b)), a, b, s)
                })
                .collect();
            let best = scored.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
            if best <= threshold {
                return None;
            }
            let by_score = |x: &(f64, f64, Option<f64>, usize), y: &(f64, f64, Option<f64>, usize)| {
                y.0.total_cmp(&x.0)
                    .then(task_records[x.3].item_id.cmp(&task_records[y.3].item_id))
            };
            if take < scored.len() {
                scored.select_nth_unstable_by(take, by_score);
                scored.truncate(take);
            }
            scored.sort_unstable_by(by_score);
            Some(FlaggedItem {
                source_image_id: retrieved.records()[r].source_image_id.clone(),
                max_similarity: best,
                status: ReviewStatus::Pending,
                evidence: scored
                    .into_iter()
                    .map(|(score, a, b, s)| Evidence {
                        item_id: task_records[s].item_id,
                        source_image_id: task_records[s].source_image_id.clone(),
                        split_tag: task_records[s].split_tag.clone(),
                        sim_a: a,
                        sim_b: b,
                        score,
                    })
                    .collect(),
            })
        })
        .collect();

    let task_splits: BTreeSet<String> = task_records.iter().map(|r| r.split_tag.clone()).collect();
    Ok(ContaminationReport {
        schema: 1,
        threshold,
        evidence_k,
        encoders: encoder_names(&retrieved),
        task_splits: task_splits.into_iter().collect(),
        retrieved_originals: rows.len(),
        flagged,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfirmationSummary {
    pub confirmed_leaks: usize,
    pub cleared: usize,
    pub removed_entries: usize,
}

/// Applies a reviewed copy of `original` to `entries`: every entry whose
/// source image was confirmed as a leak is removed.
///
/// The reviewed report must cover exactly the originally flagged images and
/// contain no pending statuses.
pub fn apply_confirmations<T: SourceImage + Clone>(
    original: &ContaminationReport,
    reviewed: &ContaminationReport,
    entries: &[T],
) -> Result<(Vec<T>, ConfirmationSummary)> {
    let flagged: HashSet<&str> = original.flagged.iter().map(|f| f.source_image_id.as_str()).collect();
    let mut statuses: HashMap<&str, ReviewStatus> = HashMap::new();
    for f in &reviewed.flagged {
        if !flagged.contains(f.source_image_id.as_str()) {
            return Err(Error::UnknownId(f.source_image_id.clone()));
        }
        statuses.insert(&f.source_image_id, f.status);
    }
    if let Some(missing) = flagged.iter().find(|id| !statuses.contains_key(*id)) {
        return Err(Error::invalid(format!("review file has no status for flagged image {missing:?}")));
    }
    let pending = reviewed.pending();
    if pending > 0 {
        return Err(Error::PendingConfirmations(pending));
    }

    let leaks: HashSet<&str> = reviewed.confirmed_leaks().collect();
    let kept: Vec<T> = entries
        .iter()
        .filter(|e| !leaks.contains(e.source_image_id()))
        .cloned()
        .collect();
    let summary = ConfirmationSummary {
        confirmed_leaks: leaks.len(),
        cleared: statuses.values().filter(|&&s| s == ReviewStatus::Cleared).count(),
        removed_entries: entries.len() - kept.len(),
    };
    log::info!(
        "confirmations: {} leaks, {} cleared, {} entries removed",
        summary.confirmed_leaks,
        summary.cleared,
        summary.removed_entries
    );
    Ok((kept, summary))
}
