use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{CropIndex, ItemRecord};

use super::CurationResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Query,
    Retrieved,
}

/// One member of the final transfer set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferEntry {
    pub item_id: u64,
    pub source_image_id: String,
    pub crop_index: CropIndex,
    pub split_tag: String,
    pub origin: Origin,
}

impl TransferEntry {
    pub fn from_record(rec: &ItemRecord, origin: Origin) -> Self {
        TransferEntry {
            item_id: rec.item_id,
            source_image_id: rec.source_image_id.clone(),
            crop_index: rec.crop_index,
            split_tag: rec.split_tag.clone(),
            origin,
        }
    }
}

/// Combines the retrieved items with the query set (queries first).
///
/// A retrieved item sharing an item id with a query is the same item when the
/// two records agree on `source_image_id`; it is then listed once, as a query.
/// Records with equal ids but different split tags live in different id
/// namespaces and are both kept. Equal ids with equal split tags but different
/// source images are an error.
pub fn assemble_transfer_set(
    result: &CurationResult,
    query_records: &[ItemRecord],
    gallery_records: &[ItemRecord],
    include_queries: bool,
) -> Result<Vec<TransferEntry>> {
    let gallery: HashMap<u64, &ItemRecord> = gallery_records.iter().map(|r| (r.item_id, r)).collect();
    let retrieved = result
        .selected
        .iter()
        .map(|id| {
            gallery
                .get(id)
                .map(|r| TransferEntry::from_record(r, Origin::Retrieved))
                .ok_or_else(|| Error::UnknownId(format!("selected item {id} is not in the gallery")))
        })
        .collect::<Result<Vec<_>>>()?;
    if include_queries {
        append_queries(query_records, retrieved)
    } else {
        Ok(retrieved)
    }
}

/// Queries first, then the retrieved entries that are not the same item as a
/// query (see [`assemble_transfer_set`] for the identity rule).
pub fn append_queries(query_records: &[ItemRecord], retrieved: Vec<TransferEntry>) -> Result<Vec<TransferEntry>> {
    let queries: HashMap<u64, &ItemRecord> = query_records.iter().map(|r| (r.item_id, r)).collect();
    let mut out: Vec<TransferEntry> = query_records
        .iter()
        .map(|r| TransferEntry::from_record(r, Origin::Query))
        .collect();
    for entry in retrieved {
        match queries.get(&entry.item_id) {
            Some(q) if q.source_image_id == entry.source_image_id => continue,
            Some(q) if q.split_tag == entry.split_tag => {
                return Err(Error::IdCollision {
                    item_id: entry.item_id,
                    split_tag: entry.split_tag,
                })
            }
            _ => out.push(entry),
        }
    }
    Ok(out)
}
