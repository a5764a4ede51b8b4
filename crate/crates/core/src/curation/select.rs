use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::knn::{top_k, top_k_batch, RankList, SearchOptions};
use crate::rng::{permutation, SeededRng, STREAM_DROP_ORDER, STREAM_RANDOM_SELECT};
use crate::store::Embeddings;

use super::{CurationRequest, CurationResult, Strategy};

/// Number of distinct items among the first `k` neighbors of every list.
/// Lists shorter than `k` contribute all they have.
pub fn union_size(lists: &[RankList], k: usize) -> usize {
    let mut seen = HashSet::new();
    for l in lists {
        for n in l.neighbors.iter().take(k) {
            seen.insert(n.item_id);
        }
    }
    seen.len()
}

/// Minimal `k >= 1` whose top-k union over all lists holds at least `n` items.
///
/// Union size never decreases with `k`, so this probes `k = 1, 2, 4, ...`
/// and then bisects the last doubling interval.
pub fn smallest_k(lists: &[RankList], n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::invalid("N must be at least 1"));
    }
    let depth = lists.iter().map(|l| l.neighbors.len()).max().unwrap_or(0);
    let reachable = union_size(lists, depth);
    if reachable < n {
        return Err(Error::Unreachable { n, available: reachable });
    }

    let mut hi = 1;
    while union_size(lists, hi) < n {
        hi = (hi * 2).min(depth);
    }
    // Invariant: union(lo) < n <= union(hi), with union(0) = 0.
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if union_size(lists, mid) >= n {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

fn check_n(n: usize, available: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("N must be at least 1"));
    }
    if n > available {
        return Err(Error::Unreachable { n, available });
    }
    Ok(())
}

fn eligible_rows(gallery: &Embeddings<'_>, opts: &SearchOptions) -> Vec<usize> {
    (0..gallery.count())
        .filter(|&r| !opts.exclude.contains(&gallery.item_id(r)))
        .collect()
}

/// Rank lists deep enough to contain the query-balanced answer: a single list
/// of depth N already holds N distinct items, so depth `min(N, available)` suffices.
fn balanced_rank_lists(
    queries: &Embeddings<'_>,
    gallery: &Embeddings<'_>,
    req: &CurationRequest,
    opts: &SearchOptions,
) -> Result<Vec<RankList>> {
    let eligible = eligible_rows(gallery, opts).len();
    check_n(req.n, eligible)?;
    let depth_for = |qid: u64| {
        let self_hit = opts.exclude_self && gallery.position_of(qid).is_some() && !opts.exclude.contains(&qid);
        req.n.min(eligible - usize::from(self_hit))
    };
    let depths: Vec<usize> = (0..queries.count()).map(|q| depth_for(queries.item_id(q))).collect();
    let shallowest = depths.iter().copied().min().unwrap_or(0);
    if shallowest == 0 {
        return Err(Error::Unreachable { n: req.n, available: 0 });
    }
    let mut lists = top_k_batch(*queries, *gallery, shallowest, req.metric, req.block_size, opts)?;
    for (q, list) in lists.iter_mut().enumerate() {
        if depths[q] > shallowest {
            *list = top_k(queries.item_id(q), queries.vector(q), *gallery, depths[q], req.metric, opts)?;
        }
    }
    Ok(lists)
}

/// Query-balanced retrieval: take the smallest `k` whose union of per-query
/// k-NN sets reaches N, then drop rank-`k` neighbors of queries visited in a
/// seeded random order until exactly N items remain.
///
/// Items whose best rank over all queries is below `k` (the core) are never
/// dropped. A rank-`k` item shared by several queries is dropped at most once.
pub fn query_balanced_select(queries: Embeddings<'_>, gallery: Embeddings<'_>, req: &CurationRequest) -> Result<CurationResult> {
    if queries.count() == 0 {
        return Err(Error::invalid("query set is empty"));
    }
    let opts = req.search_options(&gallery);
    let lists = balanced_rank_lists(&queries, &gallery, req, &opts)?;
    let k = smallest_k(&lists, req.n)?;

    let mut min_rank: HashMap<u64, u32> = HashMap::new();
    for l in &lists {
        for nb in l.neighbors.iter().take(k) {
            min_rank
                .entry(nb.item_id)
                .and_modify(|r| *r = (*r).min(nb.rank))
                .or_insert(nb.rank);
        }
    }
    let core = min_rank.values().filter(|&&r| (r as usize) < k).count();
    let fringe: HashSet<u64> = min_rank
        .iter()
        .filter(|(_, &r)| r as usize == k)
        .map(|(&id, _)| id)
        .collect();
    if core > req.n {
        return Err(Error::invalid(format!(
            "internal: {core} core items exceed N = {} at k = {k}",
            req.n
        )));
    }
    let need = req.n - core;

    let mut kept_fringe = fringe.clone();
    let mut dropped = Vec::new();
    if kept_fringe.len() > need {
        let order = permutation(req.seed, STREAM_DROP_ORDER, lists.len());
        // Every fringe item is some query's rank-k item, so one pass suffices.
        for &q in &order {
            if kept_fringe.len() == need {
                break;
            }
            let Some(nb) = lists[q].neighbors.get(k - 1) else {
                continue;
            };
            if kept_fringe.remove(&nb.item_id) {
                dropped.push((lists[q].query_id, nb.item_id));
            }
        }
        if kept_fringe.len() != need {
            return Err(Error::invalid("internal: drop procedure did not reach N"));
        }
    }

    let mut selected: Vec<(u32, u64)> = min_rank
        .iter()
        .filter(|(id, &r)| (r as usize) < k || kept_fringe.contains(id))
        .map(|(&id, &r)| (r, id))
        .collect();
    selected.sort_unstable();
    let chosen: HashSet<u64> = selected.iter().map(|&(_, id)| id).collect();

    let mut attribution = BTreeMap::new();
    for l in &lists {
        let contributed: Vec<(u64, u32)> = l
            .neighbors
            .iter()
            .take(k)
            .filter(|nb| chosen.contains(&nb.item_id))
            .map(|nb| (nb.item_id, nb.rank))
            .collect();
        attribution.insert(l.query_id, contributed);
    }

    let mut out = CurationResult::empty(req);
    out.k_final = k;
    out.selected = selected.into_iter().map(|(_, id)| id).collect();
    out.attribution = attribution;
    out.dropped = dropped;
    Ok(out)
}

/// Best-matches retrieval: gallery items in order of their best score against
/// any query (minimum Euclidean distance for the Euclidean metric).
pub fn best_matches_select(queries: Embeddings<'_>, gallery: Embeddings<'_>, req: &CurationRequest) -> Result<CurationResult> {
    if queries.count() == 0 {
        return Err(Error::invalid("query set is empty"));
    }
    let opts = req.search_options(&gallery);
    let rows = eligible_rows(&gallery, &opts);
    check_n(req.n, rows.len())?;

    // Each gallery item's nearest query is a 1-NN search with the roles swapped.
    let nearest = top_k_batch(gallery, queries, 1, req.metric, req.block_size, &SearchOptions::default())?;
    let mut scored: Vec<(f64, u64, u64)> = rows
        .iter()
        .map(|&r| {
            let nb = nearest[r].neighbors[0];
            (nb.score, gallery.item_id(r), nb.item_id)
        })
        .collect();
    scored.sort_unstable_by(|a, b| req.metric.rank_cmp(a.0, a.1, b.0, b.1));
    scored.truncate(req.n);

    let mut out = CurationResult::empty(req);
    for (pos, &(_, item, query)) in scored.iter().enumerate() {
        out.selected.push(item);
        out.attribution.entry(query).or_default().push((item, pos as u32 + 1));
    }
    Ok(out)
}

/// Uniform sample of N eligible gallery items without replacement.
pub fn random_select(gallery: Embeddings<'_>, req: &CurationRequest) -> Result<CurationResult> {
    let opts = req.search_options(&gallery);
    let mut ids: Vec<u64> = eligible_rows(&gallery, &opts).into_iter().map(|r| gallery.item_id(r)).collect();
    check_n(req.n, ids.len())?;
    let mut rng = SeededRng::new(req.seed, STREAM_RANDOM_SELECT);
    for i in 0..req.n {
        let j = i + rng.below((ids.len() - i) as u64) as usize;
        ids.swap(i, j);
    }
    ids.truncate(req.n);
    let mut out = CurationResult::empty(req);
    out.selected = ids;
    Ok(out)
}

/// Dispatches on `req.strategy`.
pub fn curate(queries: Embeddings<'_>, gallery: Embeddings<'_>, req: &CurationRequest) -> Result<CurationResult> {
    match req.strategy {
        Strategy::Random => random_select(gallery, req),
        Strategy::BestMatches => best_matches_select(queries, gallery, req),
        Strategy::QueryBalanced => query_balanced_select(queries, gallery, req),
    }
}
