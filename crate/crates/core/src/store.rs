//! Persistent embedding stores.
//!
//! A store is two files: a densely packed little-endian `f32` matrix with a
//! small binary header, and a line-delimited JSON sidecar (`<path>.meta.jsonl`)
//! holding one [`ItemRecord`] per matrix row. Opened stores are memory-mapped
//! and immutable, so any number of threads may read them concurrently.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSF1";
pub const VERSION: u32 = 1;
pub const HEADER_ALIGN: usize = 64;
pub const FLAG_NORMALIZED: u32 = 1;

/// Tolerance on row norms for stores flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Rows with a norm at or below this cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;

/// Crop position of a feature within its source image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CropIndex {
    /// Feature of the whole (resized, center-cropped) image.
    WholeImage,
    Crop(u32),
}

impl CropIndex {
    pub const WHOLE_IMAGE_TAG: &'static str = "whole-image";

    /// Integer encoding, with -1 for the whole-image sentinel.
    pub fn as_i64(self) -> i64 {
        match self {
            CropIndex::WholeImage => -1,
            CropIndex::Crop(i) => i64::from(i),
        }
    }
}

impl Serialize for CropIndex {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CropIndex::WholeImage => s.serialize_str(Self::WHOLE_IMAGE_TAG),
            CropIndex::Crop(i) => s.serialize_u32(*i),
        }
    }
}

impl<'de> Deserialize<'de> for CropIndex {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct CropIndexVisitor;

        impl Visitor<'_> for CropIndexVisitor {
            type Value = CropIndex;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a non-negative crop index, -1, or \"whole-image\"")
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<CropIndex, E> {
                match v {
                    -1 => Ok(CropIndex::WholeImage),
                    0..=0xffff_ffff => Ok(CropIndex::Crop(v as u32)),
                    _ => Err(E::custom(format!("crop index {v} out of range"))),
                }
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<CropIndex, E> {
                u32::try_from(v)
                    .map(CropIndex::Crop)
                    .map_err(|_| E::custom(format!("crop index {v} out of range")))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<CropIndex, E> {
                if v == CropIndex::WHOLE_IMAGE_TAG {
                    Ok(CropIndex::WholeImage)
                } else {
                    Err(E::custom(format!("unknown crop index tag {v:?}")))
                }
            }
        }

        d.deserialize_any(CropIndexVisitor)
    }
}

/// Crop rectangle in source-image pixels, serialized as `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 4]> for CropRect {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        CropRect { x, y, w, h }
    }
}

impl From<CropRect> for [u32; 4] {
    fn from(r: CropRect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

impl CropRect {
    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && u64::from(self.x) + u64::from(self.w) <= u64::from(width)
            && u64::from(self.y) + u64::from(self.h) <= u64::from(height)
    }
}

/// Provenance of one matrix row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: u64,
    pub source_image_id: String,
    pub crop_index: CropIndex,
    pub crop_rect: Option<CropRect>,
    #[serde(default)]
    pub aug_tag: String,
    pub split_tag: String,
    /// Source image `[width, height]`; when present, `crop_rect` must fit inside it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_size: Option<[u32; 2]>,
}

impl ItemRecord {
    /// A whole-image record with no crop provenance.
    pub fn whole_image(item_id: u64, source_image_id: impl Into<String>, split_tag: impl Into<String>) -> Self {
        ItemRecord {
            item_id,
            source_image_id: source_image_id.into(),
            crop_index: CropIndex::WholeImage,
            crop_rect: None,
            aug_tag: String::new(),
            split_tag: split_tag.into(),
            source_size: None,
        }
    }

    /// True for records belonging to a target-task split (`task-train`, `task-val`, `task-test`, ...).
    pub fn is_task_item(&self) -> bool {
        self.split_tag.starts_with("task-")
    }
}

/// Path of the metadata sidecar belonging to a store file.
pub fn metadata_path(store_path: &Path) -> PathBuf {
    let mut s = store_path.as_os_str().to_owned();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

enum Matrix {
    Owned(Vec<f32>),
    Mapped { map: Mmap, offset: usize, len: usize },
}

impl Matrix {
    fn as_slice(&self) -> &[f32] {
        match self {
            Matrix::Owned(v) => v,
            Matrix::Mapped { map, offset, len } => {
                bytemuck::cast_slice(&map[*offset..*offset + len * 4])
            }
        }
    }
}

/// A validated, immutable `count × dim` embedding matrix with per-row records.
pub struct EmbeddingStore {
    dim: usize,
    normalized: bool,
    encoder_id: String,
    records: Vec<ItemRecord>,
    matrix: Matrix,
    path: Option<PathBuf>,
}

impl fmt::Debug for EmbeddingStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddingStore")
            .field("dim", &self.dim)
            .field("count", &self.records.len())
            .field("normalized", &self.normalized)
            .field("encoder_id", &self.encoder_id)
            .field("path", &self.path)
            .finish()
    }
}

impl EmbeddingStore {
    /// Builds an in-memory store, validating every invariant a file-backed one has.
    pub fn from_parts(
        records: Vec<ItemRecord>,
        matrix: Vec<f32>,
        dim: usize,
        normalized: bool,
        encoder_id: impl Into<String>,
    ) -> Result<Self> {
        validate_parts(&records, &matrix, dim, normalized)?;
        Ok(EmbeddingStore {
            dim,
            normalized,
            encoder_id: encoder_id.into(),
            records,
            matrix: Matrix::Owned(matrix),
            path: None,
        })
    }

    /// In-memory copy of the given rows; `rows` must be ascending so ids stay increasing.
    pub fn select_rows(&self, rows: &[usize]) -> Result<EmbeddingStore> {
        let mut matrix = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            matrix.extend_from_slice(self.row(r));
        }
        let records = rows.iter().map(|&r| self.records[r].clone()).collect();
        EmbeddingStore::from_parts(records, matrix, self.dim, self.normalized, self.encoder_id.clone())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[ItemRecord] {
        &self.records
    }

    pub fn record(&self, row: usize) -> &ItemRecord {
        &self.records[row]
    }

    pub fn item_id(&self, row: usize) -> u64 {
        self.records[row].item_id
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix.as_slice()[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `start..end` as one contiguous row-major slice.
    #[inline]
    pub fn rows(&self, start: usize, end: usize) -> &[f32] {
        &self.matrix.as_slice()[start * self.dim..end * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        self.matrix.as_slice()
    }

    /// Row index of `item_id`; ids are strictly increasing so this is a binary search.
    pub fn position_of(&self, item_id: u64) -> Option<usize> {
        self.records.binary_search_by_key(&item_id, |r| r.item_id).ok()
    }

    /// Writes this store to `path` (plus its metadata sidecar).
    pub fn write(&self, path: &Path) -> Result<()> {
        write_store(path, &self.records, self.as_slice(), self.dim, self.normalized, &self.encoder_id)
    }
}

fn validate_parts(records: &[ItemRecord], matrix: &[f32], dim: usize, normalized: bool) -> Result<()> {
    if dim == 0 {
        return Err(Error::invalid("embedding dimension must be positive"));
    }
    if matrix.len() != records.len() * dim {
        return Err(Error::DimMismatch {
            expected: records.len() * dim,
            found: matrix.len(),
        });
    }
    validate_records(records)?;
    validate_matrix(records, matrix, dim, normalized)
}

fn validate_records(records: &[ItemRecord]) -> Result<()> {
    for (i, rec) in records.iter().enumerate() {
        if i > 0 && rec.item_id <= records[i - 1].item_id {
            return Err(Error::Metadata {
                line: i + 1,
                msg: format!(
                    "item_id {} is not strictly greater than the previous id {}",
                    rec.item_id,
                    records[i - 1].item_id
                ),
            });
        }
        if let (Some(rect), Some([w, h])) = (rec.crop_rect, rec.source_size) {
            if !rect.fits_within(w, h) {
                return Err(Error::Metadata {
                    line: i + 1,
                    msg: format!("crop_rect {:?} lies outside the {w}x{h} source image", <[u32; 4]>::from(rect)),
                });
            }
        }
    }
    Ok(())
}

fn validate_matrix(records: &[ItemRecord], matrix: &[f32], dim: usize, normalized: bool) -> Result<()> {
    for (row, values) in matrix.chunks_exact(dim).enumerate() {
        let mut sq = 0.0f64;
        for (col, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col });
            }
            sq += f64::from(v) * f64::from(v);
        }
        if normalized {
            let norm = sq.sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NormViolation {
                    row,
                    item_id: records[row].item_id,
                    norm,
                    tol: UNIT_NORM_TOL,
                });
            }
        }
    }
    Ok(())
}

fn header_bytes(dim: usize, count: usize, normalized: bool, encoder_id: &str) -> Result<Vec<u8>> {
    let dim = u32::try_from(dim).map_err(|_| Error::invalid("dimension exceeds u32"))?;
    let enc_len = u16::try_from(encoder_id.len()).map_err(|_| Error::invalid("encoder id longer than 65535 bytes"))?;
    let mut h = Vec::with_capacity(HEADER_ALIGN);
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&VERSION.to_le_bytes());
    h.extend_from_slice(&dim.to_le_bytes());
    h.extend_from_slice(&(count as u64).to_le_bytes());
    h.extend_from_slice(&(if normalized { FLAG_NORMALIZED } else { 0 }).to_le_bytes());
    h.extend_from_slice(&enc_len.to_le_bytes());
    h.extend_from_slice(encoder_id.as_bytes());
    h.resize(h.len().div_ceil(HEADER_ALIGN) * HEADER_ALIGN, 0);
    Ok(h)
}

/// Validates and persists a store: `path` gets the binary matrix, `path.meta.jsonl` the records.
pub fn write_store(
    path: &Path,
    records: &[ItemRecord],
    matrix: &[f32],
    dim: usize,
    normalized: bool,
    encoder_id: &str,
) -> Result<()> {
    validate_parts(records, matrix, dim, normalized)?;
    let header = header_bytes(dim, records.len(), normalized, encoder_id)?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    for chunk in matrix.chunks(1 << 16) {
        let mut buf = Vec::with_capacity(chunk.len() * 4);
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let meta = metadata_path(path);
    let file = File::create(&meta).map_err(|e| Error::io(&meta, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(&meta, e))?;
    }
    w.flush().map_err(|e| Error::io(&meta, e))?;
    Ok(())
}

struct Header {
    dim: usize,
    count: u64,
    normalized: bool,
    encoder_id: String,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const FIXED: usize = 4 + 4 + 4 + 8 + 4 + 2;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < FIXED {
        return Err(Error::Truncated {
            expected: FIXED as u64,
            found: bytes.len() as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let dim = u32_at(8) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let flags = u32_at(20);
    let enc_len = u16::from_le_bytes(bytes[24..26].try_into().unwrap()) as usize;
    if bytes.len() < FIXED + enc_len {
        return Err(Error::Truncated {
            expected: (FIXED + enc_len) as u64,
            found: bytes.len() as u64,
        });
    }
    let encoder_id = std::str::from_utf8(&bytes[FIXED..FIXED + enc_len])
        .map_err(|_| Error::invalid("encoder id is not valid UTF-8"))?
        .to_owned();
    if dim == 0 {
        return Err(Error::invalid("store header has dim = 0"));
    }
    if flags & !FLAG_NORMALIZED != 0 {
        return Err(Error::invalid(format!("unknown flag bits {flags:#x} in store header")));
    }
    Ok(Header {
        dim,
        count,
        normalized: flags & FLAG_NORMALIZED != 0,
        encoder_id,
        data_offset: (FIXED + enc_len).div_ceil(HEADER_ALIGN) * HEADER_ALIGN,
    })
}

pub fn read_metadata(path: &Path) -> Result<Vec<ItemRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ItemRecord = serde_json::from_str(&line).map_err(|e| Error::Metadata {
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Opens and validates a store written by [`write_store`]. The matrix is memory-mapped.
pub fn open_store(path: &Path) -> Result<EmbeddingStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    // SAFETY: stores are immutable once written; concurrent writers are not supported.
    let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
    let header = parse_header(&map)?;

    let data_bytes = header
        .count
        .checked_mul(header.dim as u64 * 4)
        .ok_or_else(|| Error::invalid("store header size overflow"))?;
    let expected = header.data_offset as u64 + data_bytes;
    if map.len() as u64 != expected {
        return Err(Error::Truncated {
            expected,
            found: map.len() as u64,
        });
    }

    let records = read_metadata(&metadata_path(path))?;
    if records.len() as u64 != header.count {
        return Err(Error::CountMismatch {
            header: header.count,
            metadata: records.len() as u64,
        });
    }
    validate_records(&records)?;

    let len = header.count as usize * header.dim;
    let matrix = if cfg!(target_endian = "little") && (map.as_ptr() as usize + header.data_offset).is_multiple_of(4) {
        Matrix::Mapped {
            map,
            offset: header.data_offset,
            len,
        }
    } else {
        let bytes = &map[header.data_offset..];
        Matrix::Owned(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    };
    validate_matrix(&records, matrix.as_slice(), header.dim, header.normalized)?;

    Ok(EmbeddingStore {
        dim: header.dim,
        normalized: header.normalized,
        encoder_id: header.encoder_id,
        records,
        matrix,
        path: Some(path.to_owned()),
    })
}

/// Scales every row to unit L2 norm. Norms are computed in f64.
pub fn normalize_rows(store: &EmbeddingStore) -> Result<EmbeddingStore> {
    let dim = store.dim();
    let mut out = Vec::with_capacity(store.count() * dim);
    for i in 0..store.count() {
        let row = store.row(i);
        let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm <= MIN_NORM {
            return Err(Error::ZeroNorm {
                item_id: store.item_id(i),
            });
        }
        out.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    EmbeddingStore::from_parts(store.records.clone(), out, dim, true, store.encoder_id.clone())
}

/// Two stores over the same items, embedded by different encoders.
#[derive(Debug)]
pub struct DualStore {
    a: EmbeddingStore,
    b: EmbeddingStore,
}

impl DualStore {
    pub fn new(a: EmbeddingStore, b: EmbeddingStore) -> Result<Self> {
        if a.count() != b.count() {
            return Err(Error::CountMismatch {
                header: a.count() as u64,
                metadata: b.count() as u64,
            });
        }
        if let Some(i) = (0..a.count()).find(|&i| a.item_id(i) != b.item_id(i)) {
            return Err(Error::invalid(format!(
                "dual store row {i}: item ids differ ({} vs {})",
                a.item_id(i),
                b.item_id(i)
            )));
        }
        if a.encoder_id() == b.encoder_id() {
            return Err(Error::invalid(format!(
                "dual store halves share encoder id {:?}",
                a.encoder_id()
            )));
        }
        Ok(DualStore { a, b })
    }

    pub fn a(&self) -> &EmbeddingStore {
        &self.a
    }

    pub fn b(&self) -> &EmbeddingStore {
        &self.b
    }

    pub fn count(&self) -> usize {
        self.a.count()
    }
}

/// One embedding vector: a single encoder's row, or the two rows of a dual store.
#[derive(Clone, Copy, Debug)]
pub enum VectorRef<'a> {
    Single(&'a [f32]),
    Dual(&'a [f32], &'a [f32]),
}

/// Borrowed view over either a single or a dual store.
#[derive(Clone, Copy, Debug)]
pub enum Embeddings<'a> {
    Single(&'a EmbeddingStore),
    Dual(&'a DualStore),
}

impl<'a> Embeddings<'a> {
    pub fn count(&self) -> usize {
        self.primary().count()
    }

    pub fn dim(&self) -> usize {
        self.primary().dim()
    }

    /// The single store, or the first half of a dual store.
    pub fn primary(&self) -> &'a EmbeddingStore {
        match self {
            Embeddings::Single(s) => s,
            Embeddings::Dual(d) => &d.a,
        }
    }

    pub fn records(&self) -> &'a [ItemRecord] {
        self.primary().records()
    }

    pub fn item_id(&self, row: usize) -> u64 {
        self.primary().item_id(row)
    }

    pub fn position_of(&self, item_id: u64) -> Option<usize> {
        self.primary().position_of(item_id)
    }

    pub fn is_dual(&self) -> bool {
        matches!(self, Embeddings::Dual(_))
    }

    pub fn is_normalized(&self) -> bool {
        match self {
            Embeddings::Single(s) => s.is_normalized(),
            Embeddings::Dual(d) => d.a.is_normalized() && d.b.is_normalized(),
        }
    }

    #[inline]
    pub fn vector(&self, row: usize) -> VectorRef<'a> {
        match self {
            Embeddings::Single(s) => VectorRef::Single(s.row(row)),
            Embeddings::Dual(d) => VectorRef::Dual(d.a.row(row), d.b.row(row)),
        }
    }
}

/// Owned counterpart of [`Embeddings`].
#[derive(Debug)]
pub enum StoreSet {
    Single(EmbeddingStore),
    Dual(DualStore),
}

impl StoreSet {
    /// Opens one store, or a dual store when `second` is given.
    pub fn open(first: &Path, second: Option<&Path>) -> Result<Self> {
        let a = open_store(first)?;
        match second {
            None => Ok(StoreSet::Single(a)),
            Some(p) => Ok(StoreSet::Dual(DualStore::new(a, open_store(p)?)?)),
        }
    }

    pub fn view(&self) -> Embeddings<'_> {
        match self {
            StoreSet::Single(s) => Embeddings::Single(s),
            StoreSet::Dual(d) => Embeddings::Dual(d),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<StoreSet> {
        Ok(match self {
            StoreSet::Single(s) => StoreSet::Single(s.select_rows(rows)?),
            StoreSet::Dual(d) => StoreSet::Dual(DualStore::new(d.a.select_rows(rows)?, d.b.select_rows(rows)?)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand_core::{RngCore, SeedableRng};

    fn recs(n: usize) -> Vec<ItemRecord> {
        (0..n).map(|i| ItemRecord::whole_image(i as u64 * 3 + 1, format!("img-{i}"), "gallery")).collect()
    }

    fn random_matrix(n: usize, dim: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * dim).map(|_| (rng.next_u32() as f32 / u32::MAX as f32) * 2.0 - 1.0).collect()
    }

    #[test]
    fn zeros_round_trip_recovers_48_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.tsf");
        write_store(&path, &recs(3), &[0.0; 12], 4, false, "enc").unwrap();
        let s = open_store(&path).unwrap();
        assert_eq!((s.count(), s.dim()), (3, 4));
        let bytes: &[u8] = bytemuck::cast_slice(s.as_slice());
        assert_eq!(bytes, &[0u8; 48][..]);
        assert_eq!(s.records(), &recs(3)[..]);
    }

    #[test]
    fn header_dim_field_reads_768() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsf");
        write_store(&path, &recs(2), &random_matrix(2, 768, 1), 768, false, "clip-vit-l14").unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(u32::from_le_bytes(raw[8..12].try_into().unwrap()), 768);
        assert_eq!(raw.len(), 64 + 2 * 768 * 4);
    }

    #[test]
    fn seeded_random_store_is_byte_identical_after_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.tsf");
        let m = random_matrix(100, 16, 7);
        write_store(&path, &recs(100), &m, 16, false, "enc").unwrap();
        let s = open_store(&path).unwrap();
        let got: &[u8] = bytemuck::cast_slice(s.as_slice());
        let want: &[u8] = bytemuck::cast_slice(&m);
        assert_eq!(got, want);
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[64..], want);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsf");
        write_store(&path, &recs(2), &[1.0; 8], 4, false, "enc").unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw[0] = b'X';
        std::fs::write(&path, raw).unwrap();
        let err = open_store(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn metadata_short_by_one_record_is_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsf");
        write_store(&path, &recs(5), &[1.0; 20], 4, false, "enc").unwrap();
        let meta = metadata_path(&path);
        let text = std::fs::read_to_string(&meta).unwrap();
        let kept: Vec<&str> = text.lines().take(4).collect();
        std::fs::write(&meta, kept.join("\n") + "\n").unwrap();
        let err = open_store(&path).unwrap_err();
        assert!(err.to_string().contains("count mismatch"), "{err}");
    }

    #[test]
    fn truncated_matrix_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsf");
        write_store(&path, &recs(5), &[1.0; 20], 4, false, "enc").unwrap();
        let raw = std::fs::read(&path).unwrap();
        std::fs::write(&path, &raw[..raw.len() - 4]).unwrap();
        assert!(matches!(open_store(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn write_rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsf");
        assert!(matches!(
            write_store(&path, &recs(2), &[1.0; 7], 4, false, "e"),
            Err(Error::DimMismatch { .. })
        ));
        let mut m = vec![1.0; 8];
        m[5] = f32::NAN;
        assert!(matches!(
            write_store(&path, &recs(2), &m, 4, false, "e"),
            Err(Error::NonFinite { row: 1, col: 1 })
        ));
        assert!(matches!(
            write_store(&path, &recs(2), &[1.0; 8], 4, true, "e"),
            Err(Error::NormViolation { row: 0, .. })
        ));
        let mut r = recs(2);
        r[1].item_id = r[0].item_id;
        assert!(matches!(write_store(&path, &r, &[1.0; 8], 4, false, "e"), Err(Error::Metadata { .. })));
    }

    #[test]
    fn crop_rect_outside_source_bounds_is_rejected() {
        let mut r = recs(1);
        r[0].crop_index = CropIndex::Crop(3);
        r[0].crop_rect = Some(CropRect { x: 10, y: 0, w: 100, h: 50 });
        r[0].source_size = Some([100, 100]);
        assert!(EmbeddingStore::from_parts(r.clone(), vec![1.0; 2], 2, false, "e").is_err());
        r[0].crop_rect = Some(CropRect { x: 0, y: 0, w: 100, h: 50 });
        assert!(EmbeddingStore::from_parts(r, vec![1.0; 2], 2, false, "e").is_ok());
    }

    #[test]
    fn crop_index_serializes_whole_image_sentinel() {
        let mut r = ItemRecord::whole_image(5, "img", "gallery");
        let line = serde_json::to_string(&r).unwrap();
        assert_eq!(
            line,
            r#"{"item_id":5,"source_image_id":"img","crop_index":"whole-image","crop_rect":null,"aug_tag":"","split_tag":"gallery"}"#
        );
        r.crop_index = CropIndex::Crop(7);
        r.crop_rect = Some(CropRect { x: 1, y: 2, w: 3, h: 4 });
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains(r#""crop_index":7,"crop_rect":[1,2,3,4]"#));
        let neg: ItemRecord = serde_json::from_str(
            r#"{"item_id":1,"source_image_id":"a","crop_index":-1,"crop_rect":null,"aug_tag":"","split_tag":"q"}"#,
        )
        .unwrap();
        assert_eq!(neg.crop_index, CropIndex::WholeImage);
        assert_eq!(CropIndex::WholeImage.as_i64(), -1);
    }

    #[test]
    fn normalize_three_four_five() {
        let s = EmbeddingStore::from_parts(recs(2), vec![3.0, 4.0, 1.0, 0.0], 2, false, "e").unwrap();
        let n = normalize_rows(&s).unwrap();
        assert!(n.is_normalized());
        assert_eq!(n.row(0), &[0.6f32, 0.8][..]);
        assert_eq!(n.row(1), &[1.0f32, 0.0][..]);
    }

    #[test]
    fn normalize_random_rows_are_unit_and_idempotent() {
        let s = EmbeddingStore::from_parts(recs(50), random_matrix(50, 8, 3), 8, false, "e").unwrap();
        let once = normalize_rows(&s).unwrap();
        for i in 0..50 {
            let norm: f64 = once.row(i).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6, "row {i}: {norm}");
            let (a, b) = (s.row(i), once.row(i));
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
            let na: f64 = a.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            assert!(dot / (na * norm) >= 1.0 - 1e-12);
        }
        let twice = normalize_rows(&once).unwrap();
        for (x, y) in once.as_slice().iter().zip(twice.as_slice()) {
            assert!((x - y).abs() <= 1e-7);
        }
    }

    #[test]
    fn normalize_reports_zero_row_item() {
        let s = EmbeddingStore::from_parts(recs(2), vec![1.0, 0.0, 0.0, 0.0], 2, false, "e").unwrap();
        assert!(matches!(normalize_rows(&s), Err(Error::ZeroNorm { item_id: 4 })));
    }

    #[test]
    fn dual_store_alignment_and_encoder_checks() {
        let a = EmbeddingStore::from_parts(recs(2), vec![1.0; 4], 2, false, "a").unwrap();
        let b = EmbeddingStore::from_parts(recs(2), vec![1.0; 4], 2, false, "a").unwrap();
        assert!(DualStore::new(a, b).is_err());
        let a = EmbeddingStore::from_parts(recs(2), vec![1.0; 4], 2, false, "a").unwrap();
        let mut r = recs(2);
        r[1].item_id += 1;
        let b = EmbeddingStore::from_parts(r, vec![1.0; 4], 2, false, "b").unwrap();
        assert!(DualStore::new(a, b).is_err());
        let a = EmbeddingStore::from_parts(recs(2), vec![1.0; 4], 2, false, "a").unwrap();
        let b = EmbeddingStore::from_parts(recs(2), vec![2.0; 4], 2, false, "b").unwrap();
        let d = DualStore::new(a, b).unwrap();
        for i in 0..d.count() {
            assert_eq!(d.a().item_id(i), d.b().item_id(i));
        }
    }

    #[test]
    fn normalized_flag_is_validated_at_open() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.tsf");
        write_store(&path, &recs(1), &[0.6, 0.8], 2, true, "e").unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw[64..68].copy_from_slice(&0.9f32.to_le_bytes());
        std::fs::write(&path, raw).unwrap();
        assert!(matches!(open_store(&path), Err(Error::NormViolation { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn write_open_is_identity(
                n in 0usize..20,
                dim in 1usize..9,
                seed in any::<u64>(),
                enc in "[a-z0-9-]{0,40}",
            ) {
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("p.tsf");
                let m = random_matrix(n, dim, seed);
                write_store(&path, &recs(n), &m, dim, false, &enc).unwrap();
                let s = open_store(&path).unwrap();
                prop_assert_eq!(s.encoder_id(), enc.as_str());
                prop_assert_eq!(s.records(), &recs(n)[..]);
                let got: &[u8] = bytemuck::cast_slice(s.as_slice());
                let want: &[u8] = bytemuck::cast_slice(&m);
                prop_assert_eq!(got, want);
            }
        }
    }
}
