//! Post-retrieval quality control: near-duplicate removal and
//! contamination review against the target task's images.
//!
//! Both checks run on whole-image ("original") features keyed by
//! `source_image_id`. Duplicates use the mean of the two encoders'
//! similarities, contamination the max; both thresholds are strict.

mod contamination;
mod dedup;

pub use contamination::{
    apply_confirmations, flag_contamination, ConfirmationSummary, ContaminationReport, Evidence, FlaggedItem,
    ReviewStatus, DECONTAM_THRESHOLD, EVIDENCE_K,
};
pub use dedup::{
    cluster_duplicates, dedup_retain, find_duplicate_pairs, unique_originals, Cluster, DedupOptions,
    DuplicateClusters, DuplicatePair, DEDUP_THRESHOLD,
};

use crate::curation::TransferEntry;
use crate::store::ItemRecord;

/// Anything that remembers which source image it came from.
pub trait SourceImage {
    fn source_image_id(&self) -> &str;
}

impl SourceImage for ItemRecord {
    fn source_image_id(&self) -> &str {
        &self.source_image_id
    }
}

impl SourceImage for TransferEntry {
    fn source_image_id(&self) -> &str {
        &self.source_image_id
    }
}

impl SourceImage for String {
    fn source_image_id(&self) -> &str {
        self
    }
}

use crate::error::{Error, Result};
use crate::store::Embeddings;

fn require_normalized(e: &Embeddings<'_>, role: &str) -> Result<()> {
    if e.is_normalized() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{role} store must be normalized")))
    }
}

/// Per-encoder cosine similarities of two rows (the second is `None` for single stores).
#[inline]
fn encoder_sims(x: &Embeddings<'_>, i: usize, y: &Embeddings<'_>, j: usize) -> (f64, Option<f64>) {
    use crate::knn::dot;
    use crate::store::VectorRef;
    match (x.vector(i), y.vector(j)) {
        (VectorRef::Dual(xa, xb), VectorRef::Dual(ya, yb)) => (dot(xa, ya), Some(dot(xb, yb))),
        (VectorRef::Single(xa), VectorRef::Single(ya)) => (dot(xa, ya), None),
        _ => unreachable!("store shapes are checked before scoring"),
    }
}

fn check_same_shape(x: &Embeddings<'_>, y: &Embeddings<'_>) -> Result<()> {
    if x.is_dual() != y.is_dual() {
        return Err(Error::invalid("retrieved and task stores must both be single or both be dual"));
    }
    let dims = match (x, y) {
        (Embeddings::Dual(a), Embeddings::Dual(b)) => vec![(a.a().dim(), b.a().dim()), (a.b().dim(), b.b().dim())],
        _ => vec![(x.dim(), y.dim())],
    };
    for (d1, d2) in dims {
        if d1 != d2 {
            return Err(Error::DimMismatch { expected: d1, found: d2 });
        }
    }
    Ok(())
}
