//! Exact top-k nearest-neighbor search.
//!
//! Every score is accumulated in f64 in ascending dimension order, whatever
//! path computes it. The blocked kernel interleaves [`LANES`] gallery rows so
//! the compiler can vectorize across rows while each row keeps its own
//! sequential accumulator; its scores are therefore bit-identical to the
//! scalar loop. Candidates are ordered by `(score, item_id)`, a total order,
//! so merging per-block results is associative and the output does not
//! depend on block size, partitioning or thread count.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Embeddings, VectorRef, UNIT_NORM_TOL};

/// Gallery rows scored together by the blocked kernel.
pub const LANES: usize = 8;

/// Default gallery block size (rows) for batch search.
pub const DEFAULT_BLOCK_SIZE: usize = 256;

const QUERY_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// L2 distance, smaller is nearer.
    Euclidean,
    /// Dot product of unit vectors, larger is nearer.
    Cosine,
    /// Mean of the two encoders' cosine similarities, larger is nearer.
    DualAvgCosine,
}

impl Metric {
    pub fn ascending(self) -> bool {
        matches!(self, Metric::Euclidean)
    }

    pub fn requires_dual(self) -> bool {
        matches!(self, Metric::DualAvgCosine)
    }

    pub fn requires_unit_norm(self) -> bool {
        !self.ascending()
    }

    /// `Less` when `(a_score, a_id)` ranks ahead of `(b_score, b_id)`.
    #[inline]
    pub fn rank_cmp(self, a_score: f64, a_id: u64, b_score: f64, b_id: u64) -> Ordering {
        let by_score = if self.ascending() {
            a_score.total_cmp(&b_score)
        } else {
            b_score.total_cmp(&a_score)
        };
        by_score.then(a_id.cmp(&b_id))
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
            Metric::DualAvgCosine => "dual-avg-cosine",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            "dual-avg-cosine" => Ok(Metric::DualAvgCosine),
            _ => Err(Error::invalid(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub item_id: u64,
    pub score: f64,
    /// 1-based.
    pub rank: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankList {
    pub query_id: u64,
    pub metric: Metric,
    pub neighbors: Vec<Neighbor>,
}

impl RankList {
    pub fn ids(&self) -> Vec<u64> {
        self.neighbors.iter().map(|n| n.item_id).collect()
    }
}

/// Items removed from the candidate pool before ranking.
#[derive(Clone, Debug, Default)]
pub struct SearchOptions {
    pub exclude: HashSet<u64>,
    /// Skip the gallery item whose id equals the query's id.
    pub exclude_self: bool,
}

impl SearchOptions {
    #[inline]
    fn excludes(&self, query_id: u64, item_id: u64) -> bool {
        (self.exclude_self && item_id == query_id) || self.exclude.contains(&item_id)
    }

    fn available(&self, query_id: u64, gallery: &Embeddings<'_>) -> usize {
        let excluded = self.exclude.iter().filter(|&&id| gallery.position_of(id).is_some()).count();
        let self_hit = self.exclude_self
            && !self.exclude.contains(&query_id)
            && gallery.position_of(query_id).is_some();
        gallery.count() - excluded - usize::from(self_hit)
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += f64::from(x) * f64::from(y);
    }
    acc
}

#[inline]
pub(crate) fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = f64::from(x) - f64::from(y);
        acc += d * d;
    }
    acc
}

/// Score of one pair under `metric`. Shapes must already be compatible.
#[inline]
pub(crate) fn score_pair(metric: Metric, q: VectorRef<'_>, g: VectorRef<'_>) -> f64 {
    match (metric, q, g) {
        (Metric::Euclidean, VectorRef::Single(q), VectorRef::Single(g)) => squared_l2(q, g).sqrt(),
        (Metric::Cosine, VectorRef::Single(q), VectorRef::Single(g)) => dot(q, g),
        (Metric::DualAvgCosine, VectorRef::Dual(qa, qb), VectorRef::Dual(ga, gb)) => {
            (dot(qa, ga) + dot(qb, gb)) / 2.0
        }
        _ => unreachable!("metric/shape compatibility is checked before scoring"),
    }
}

fn check_unit_rows(rows: &[f32], dim: usize) -> Result<()> {
    for (row, v) in rows.chunks_exact(dim).enumerate() {
        let norm = dot(v, v).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NormViolation {
                row,
                item_id: row as u64,
                norm,
                tol: UNIT_NORM_TOL,
            });
        }
    }
    Ok(())
}

fn check_embeddings(metric: Metric, e: &Embeddings<'_>, role: &str) -> Result<()> {
    if metric.requires_dual() != e.is_dual() {
        return Err(Error::invalid(format!(
            "metric {} needs {} {role} embeddings",
            metric.name(),
            if metric.requires_dual() { "dual-encoder" } else { "single-encoder" }
        )));
    }
    if metric.requires_unit_norm() && !e.is_normalized() {
        match e {
            Embeddings::Single(s) => check_unit_rows(s.as_slice(), s.dim())?,
            Embeddings::Dual(d) => {
                check_unit_rows(d.a().as_slice(), d.a().dim())?;
                check_unit_rows(d.b().as_slice(), d.b().dim())?;
            }
        }
    }
    Ok(())
}

fn check_compatible(metric: Metric, queries: &Embeddings<'_>, gallery: &Embeddings<'_>) -> Result<()> {
    check_embeddings(metric, queries, "query")?;
    check_embeddings(metric, gallery, "gallery")?;
    let pairs: Vec<(usize, usize)> = match (queries, gallery) {
        (Embeddings::Dual(q), Embeddings::Dual(g)) => {
            vec![(q.a().dim(), g.a().dim()), (q.b().dim(), g.b().dim())]
        }
        _ => vec![(queries.dim(), gallery.dim())],
    };
    for (qd, gd) in pairs {
        if qd != gd {
            return Err(Error::DimMismatch { expected: gd, found: qd });
        }
    }
    Ok(())
}

/// A row-major block of embeddings: one encoder, or two encoders over the same rows.
#[derive(Clone, Copy, Debug)]
pub enum BlockRef<'a> {
    Single(&'a [f32]),
    Dual(&'a [f32], &'a [f32]),
}

impl BlockRef<'_> {
    fn validate(&self, dim: usize, metric: Metric, role: &str) -> Result<usize> {
        let (a, b) = match *self {
            BlockRef::Single(a) => (a, None),
            BlockRef::Dual(a, b) => (a, Some(b)),
        };
        if metric.requires_dual() != b.is_some() {
            return Err(Error::invalid(format!("metric {} does not accept this {role} block", metric.name())));
        }
        if a.len() % dim != 0 {
            return Err(Error::DimMismatch {
                expected: dim,
                found: a.len() % dim,
            });
        }
        if let Some(b) = b {
            if b.len() != a.len() {
                return Err(Error::invalid(format!("{role} block halves differ in length")));
            }
        }
        if metric.requires_unit_norm() {
            check_unit_rows(a, dim)?;
            if let Some(b) = b {
                check_unit_rows(b, dim)?;
            }
        }
        Ok(a.len() / dim)
    }

    fn rows(&self, dim: usize, start: usize, end: usize) -> (&[f32], Option<&[f32]>) {
        match *self {
            BlockRef::Single(a) => (&a[start * dim..end * dim], None),
            BlockRef::Dual(a, b) => (&a[start * dim..end * dim], Some(&b[start * dim..end * dim])),
        }
    }
}

/// Full `q × g` score matrix between two blocks, accumulated in f64.
pub fn pairwise_scores(queries: BlockRef<'_>, gallery: BlockRef<'_>, dim: usize, metric: Metric) -> Result<Array2<f64>> {
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let nq = queries.validate(dim, metric, "query")?;
    let ng = gallery.validate(dim, metric, "gallery")?;
    let mut out = Array2::<f64>::zeros((nq, ng));
    let (ga, gb) = gallery.rows(dim, 0, ng);
    let mut tile = Tile::default();
    tile.fill(ga, gb, dim);
    let mut scratch = QueryScratch::default();
    for i in 0..nq {
        let (qa, qb) = queries.rows(dim, i, i + 1);
        scratch.load(qa, qb);
        let row = out.row_mut(i).into_slice().expect("standard layout");
        tile.score(metric, &scratch, row);
    }
    Ok(out)
}

/// Gallery rows transposed into groups of [`LANES`] (`[group][dim][lane]`), widened to f64.
#[derive(Default)]
struct Tile {
    dim: usize,
    rows: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Default)]
struct QueryScratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl QueryScratch {
    fn load(&mut self, a: &[f32], b: Option<&[f32]>) {
        self.a.clear();
        self.a.extend(a.iter().map(|&v| f64::from(v)));
        self.b.clear();
        if let Some(b) = b {
            self.b.extend(b.iter().map(|&v| f64::from(v)));
        }
    }
}

impl Tile {
    fn fill(&mut self, a: &[f32], b: Option<&[f32]>, dim: usize) {
        self.dim = dim;
        self.rows = a.len() / dim;
        transpose_into(&mut self.a, a, dim);
        match b {
            Some(b) => transpose_into(&mut self.b, b, dim),
            None => self.b.clear(),
        }
    }

    fn score(&self, metric: Metric, q: &QueryScratch, out: &mut [f64]) {
        let stride = self.dim * LANES;
        for (g, out) in out[..self.rows].chunks_mut(LANES).enumerate() {
            let block_a = &self.a[g * stride..(g + 1) * stride];
            let lanes = match metric {
                Metric::Euclidean => l2_lanes(&q.a, block_a).map(f64::sqrt),
                Metric::Cosine => dot_lanes(&q.a, block_a),
                Metric::DualAvgCosine => {
                    let sa = dot_lanes(&q.a, block_a);
                    let sb = dot_lanes(&q.b, &self.b[g * stride..(g + 1) * stride]);
                    std::array::from_fn(|l| (sa[l] + sb[l]) / 2.0)
                }
            };
            out.copy_from_slice(&lanes[..out.len()]);
        }
    }
}

fn transpose_into(dst: &mut Vec<f64>, rows: &[f32], dim: usize) {
    let n = rows.len() / dim;
    let groups = n.div_ceil(LANES);
    dst.clear();
    dst.resize(groups * dim * LANES, 0.0);
    for (r, row) in rows.chunks_exact(dim).enumerate() {
        let base = (r / LANES) * dim * LANES + r % LANES;
        for (i, &v) in row.iter().enumerate() {
            dst[base + i * LANES] = f64::from(v);
        }
    }
}

#[inline(always)]
fn dot_lanes(q: &[f64], block: &[f64]) -> [f64; LANES] {
    let mut acc = [0.0f64; LANES];
    for (col, &qi) in block.chunks_exact(LANES).zip(q) {
        let col: &[f64; LANES] = col.try_into().unwrap();
        for l in 0..LANES {
            acc[l] += qi * col[l];
        }
    }
    acc
}

#[inline(always)]
fn l2_lanes(q: &[f64], block: &[f64]) -> [f64; LANES] {
    let mut acc = [0.0f64; LANES];
    for (col, &qi) in block.chunks_exact(LANES).zip(q) {
        let col: &[f64; LANES] = col.try_into().unwrap();
        for l in 0..LANES {
            let d = qi - col[l];
            acc[l] += d * d;
        }
    }
    acc
}

/// Heap key: smaller is better. Descending metrics negate the score.
#[derive(Clone, Copy, Debug)]
struct Candidate {
    key: f64,
    id: u64,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.total_cmp(&other.key).then(self.id.cmp(&other.id))
    }
}

/// Bounded selection of the `k` best candidates (max-heap on the worst kept).
struct TopK {
    k: usize,
    negate: bool,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    fn new(k: usize, metric: Metric) -> Self {
        TopK {
            k,
            negate: !metric.ascending(),
            heap: BinaryHeap::with_capacity(k.min(1 << 16) + 1),
        }
    }

    #[inline]
    fn push(&mut self, score: f64, id: u64) {
        let c = Candidate {
            key: if self.negate { -score } else { score },
            id,
        };
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if c < *worst {
                *worst = c;
            }
        }
    }

    fn into_sorted(self) -> Vec<Candidate> {
        self.heap.into_sorted_vec()
    }

    fn finish(self, query_id: u64, metric: Metric) -> RankList {
        let negate = self.negate;
        let neighbors = self
            .into_sorted()
            .into_iter()
            .enumerate()
            .map(|(i, c)| Neighbor {
                item_id: c.id,
                score: if negate { -c.key } else { c.key },
                rank: i as u32 + 1,
            })
            .collect();
        RankList {
            query_id,
            metric,
            neighbors,
        }
    }
}

fn check_k(k: usize, available: usize) -> Result<()> {
    if k == 0 || k > available {
        return Err(Error::KOutOfRange { k, available });
    }
    Ok(())
}

/// The `k` gallery items nearest to one query, best first.
pub fn top_k(
    query_id: u64,
    query: VectorRef<'_>,
    gallery: Embeddings<'_>,
    k: usize,
    metric: Metric,
    opts: &SearchOptions,
) -> Result<RankList> {
    let (qdim, dual) = match query {
        VectorRef::Single(a) => (a.len(), false),
        VectorRef::Dual(a, b) => {
            if a.len() != b.len() {
                return Err(Error::invalid("dual query halves differ in length"));
            }
            (a.len(), true)
        }
    };
    if dual != metric.requires_dual() {
        return Err(Error::invalid(format!("metric {} does not accept this query shape", metric.name())));
    }
    if qdim != gallery.dim() {
        return Err(Error::DimMismatch {
            expected: gallery.dim(),
            found: qdim,
        });
    }
    if metric.requires_unit_norm() {
        match query {
            VectorRef::Single(a) => check_unit_rows(a, qdim)?,
            VectorRef::Dual(a, b) => {
                check_unit_rows(a, qdim)?;
                check_unit_rows(b, qdim)?;
            }
        }
    }
    check_embeddings(metric, &gallery, "gallery")?;
    check_k(k, opts.available(query_id, &gallery))?;

    let mut best = TopK::new(k, metric);
    for row in 0..gallery.count() {
        let id = gallery.item_id(row);
        if opts.excludes(query_id, id) {
            continue;
        }
        best.push(score_pair(metric, query, gallery.vector(row)), id);
    }
    Ok(best.finish(query_id, metric))
}

/// [`top_k`] for every query row, computed in gallery blocks of `block_size`
/// rows and parallelized over query chunks and gallery partitions.
pub fn top_k_batch(
    queries: Embeddings<'_>,
    gallery: Embeddings<'_>,
    k: usize,
    metric: Metric,
    block_size: usize,
    opts: &SearchOptions,
) -> Result<Vec<RankList>> {
    if block_size == 0 {
        return Err(Error::invalid("block size must be at least 1"));
    }
    check_compatible(metric, &queries, &gallery)?;
    for q in 0..queries.count() {
        check_k(k, opts.available(queries.item_id(q), &gallery))?;
    }
    let nq = queries.count();
    if nq == 0 {
        return Ok(Vec::new());
    }

    let ng = gallery.count();
    let n_blocks = ng.div_ceil(block_size);
    let n_chunks = nq.div_ceil(QUERY_CHUNK);
    let wanted = rayon::current_num_threads() * 2;
    let n_parts = if n_chunks >= wanted {
        1
    } else {
        wanted.div_ceil(n_chunks).min(n_blocks).max(1)
    };
    let blocks_per_part = n_blocks.div_ceil(n_parts);

    let tasks: Vec<(usize, usize)> = (0..n_chunks)
        .flat_map(|c| (0..n_parts).map(move |p| (c, p)))
        .collect();

    let partials: Vec<Vec<Vec<Candidate>>> = tasks
        .par_iter()
        .map(|&(c, p)| {
            let q_lo = c * QUERY_CHUNK;
            let q_hi = (q_lo + QUERY_CHUNK).min(nq);
            let g_lo = (p * blocks_per_part * block_size).min(ng);
            let g_hi = ((p + 1) * blocks_per_part * block_size).min(ng);
            search_range(&queries, &gallery, q_lo..q_hi, g_lo..g_hi, k, metric, block_size, opts)
        })
        .collect();

    let negate = !metric.ascending();
    let mut out = Vec::with_capacity(nq);
    for c in 0..n_chunks {
        let parts = &partials[c * n_parts..(c + 1) * n_parts];
        for local in 0..parts[0].len() {
            let q = c * QUERY_CHUNK + local;
            let mut merged: Vec<Candidate> = if n_parts == 1 {
                parts[0][local].clone()
            } else {
                let mut all: Vec<Candidate> = parts.iter().flat_map(|p| p[local].iter().copied()).collect();
                all.sort_unstable();
                all.truncate(k);
                all
            };
            merged.truncate(k);
            out.push(RankList {
                query_id: queries.item_id(q),
                metric,
                neighbors: merged
                    .into_iter()
                    .enumerate()
                    .map(|(i, c)| Neighbor {
                        item_id: c.id,
                        score: if negate { -c.key } else { c.key },
                        rank: i as u32 + 1,
                    })
                    .collect(),
            });
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn search_range(
    queries: &Embeddings<'_>,
    gallery: &Embeddings<'_>,
    q_range: std::ops::Range<usize>,
    g_range: std::ops::Range<usize>,
    k: usize,
    metric: Metric,
    block_size: usize,
    opts: &SearchOptions,
) -> Vec<Vec<Candidate>> {
    let mut heaps: Vec<TopK> = q_range.clone().map(|_| TopK::new(k, metric)).collect();
    let scratch: Vec<QueryScratch> = q_range
        .clone()
        .map(|q| {
            let mut s = QueryScratch::default();
            match queries.vector(q) {
                VectorRef::Single(a) => s.load(a, None),
                VectorRef::Dual(a, b) => s.load(a, Some(b)),
            }
            s
        })
        .collect();
    let query_ids: Vec<u64> = q_range.clone().map(|q| queries.item_id(q)).collect();

    let mut tile = Tile::default();
    let mut scores = vec![0.0f64; block_size.min(g_range.len().max(1))];
    let mut start = g_range.start;
    while start < g_range.end {
        let end = (start + block_size).min(g_range.end);
        match gallery {
            Embeddings::Single(s) => tile.fill(s.rows(start, end), None, s.dim()),
            Embeddings::Dual(d) => tile.fill(d.a().rows(start, end), Some(d.b().rows(start, end)), d.a().dim()),
        }
        let ids = &gallery.records()[start..end];
        let out = &mut scores[..end - start];
        for ((heap, q), &qid) in heaps.iter_mut().zip(&scratch).zip(&query_ids) {
            tile.score(metric, q, out);
            for (&s, rec) in out.iter().zip(ids) {
                if !opts.excludes(qid, rec.item_id) {
                    heap.push(s, rec.item_id);
                }
            }
        }
        start = end;
    }
    heaps.into_iter().map(TopK::into_sorted).collect()
}

/// Smallest Euclidean distance from `x` to any row of `set`.
pub fn min_distance_to_set(x: &[f32], set: &crate::store::EmbeddingStore) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("query set is empty"));
    }
    if x.len() != set.dim() {
        return Err(Error::DimMismatch {
            expected: set.dim(),
            found: x.len(),
        });
    }
    Ok((0..set.count())
        .map(|i| squared_l2(x, set.row(i)))
        .fold(f64::INFINITY, f64::min)
        .sqrt())
}
