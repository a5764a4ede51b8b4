use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::Embeddings;

use super::{encoder_sims, require_normalized, SourceImage};

/// Pairs of originals whose averaged similarity exceeds this are duplicates.
pub const DEDUP_THRESHOLD: f64 = 0.99;

/// Slack on `|cos_b| <= 1` for rows normalized within `UNIT_NORM_TOL`.
const COS_SLACK: f64 = 3e-5;

#[derive(Clone, Debug)]
pub struct DedupOptions {
    pub threshold: f64,
    /// Skip pairs whose first-encoder similarity already rules out the average.
    pub prefilter: bool,
}

impl Default for DedupOptions {
    fn default() -> Self {
        DedupOptions {
            threshold: DEDUP_THRESHOLD,
            prefilter: true,
        }
    }
}

impl DedupOptions {
    /// Since `cos_b <= 1 + COS_SLACK`, `(cos_a + cos_b) / 2 > t` implies
    /// `cos_a > 2t - 1 - COS_SLACK`; pairs below that bound cannot qualify.
    fn prefilter_bound(&self) -> f64 {
        2.0 * self.threshold - 1.0 - COS_SLACK
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuplicatePair {
    pub a: String,
    pub b: String,
    pub avg_sim: f64,
}

/// Row index of the first occurrence of each source image, in row order.
pub fn unique_originals(e: Embeddings<'_>) -> Vec<usize> {
    let mut seen = HashSet::new();
    (0..e.count())
        .filter(|&r| seen.insert(e.records()[r].source_image_id.as_str()))
        .collect()
}

/// All unordered pairs of distinct source images whose mean encoder
/// similarity strictly exceeds `opts.threshold`. Pairs come back sorted with
/// `a < b`.
pub fn find_duplicate_pairs(originals: Embeddings<'_>, opts: &DedupOptions) -> Result<Vec<DuplicatePair>> {
    require_normalized(&originals, "originals")?;
    let rows = unique_originals(originals);
    let bound = opts.prefilter_bound();
    let use_prefilter = opts.prefilter && originals.is_dual();
    let records = originals.records();

    let mut pairs: Vec<DuplicatePair> = (0..rows.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let ri = rows[i];
            let mut found = Vec::new();
            for &rj in &rows[i + 1..] {
                let avg = match originals {
                    Embeddings::Dual(d) => {
                        let ca = crate::knn::dot(d.a().row(ri), d.a().row(rj));
                        if use_prefilter && ca < bound {
                            continue;
                        }
                        let cb = crate::knn::dot(d.b().row(ri), d.b().row(rj));
                        (ca + cb) / 2.0
                    }
                    Embeddings::Single(_) => encoder_sims(&originals, ri, &originals, rj).0,
                };
                if avg > opts.threshold {
                    let (x, y) = (&records[ri].source_image_id, &records[rj].source_image_id);
                    let (a, b) = if x < y { (x, y) } else { (y, x) };
                    found.push(DuplicatePair {
                        a: a.clone(),
                        b: b.clone(),
                        avg_sim: avg,
                    });
                }
            }
            found
        })
        .collect();
    pairs.sort_by(|p, q| (&p.a, &p.b).cmp(&(&q.a, &q.b)));
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub representative: String,
    /// Sorted; includes the representative.
    pub members: Vec<String>,
}

/// Connected components of the duplicate-pair graph over a universe of source images.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateClusters {
    pub clusters: Vec<Cluster>,
}

impl DuplicateClusters {
    pub fn representatives(&self) -> impl Iterator<Item = &str> {
        self.clusters.iter().map(|c| c.representative.as_str())
    }

    /// Number of source images that are not their cluster's representative.
    pub fn removed_count(&self) -> usize {
        self.clusters.iter().map(|c| c.members.len() - 1).sum()
    }

    pub fn representative_map(&self) -> HashMap<&str, &str> {
        self.clusters
            .iter()
            .flat_map(|c| c.members.iter().map(move |m| (m.as_str(), c.representative.as_str())))
            .collect()
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // Root at the smaller index so components are rooted at their smallest member.
        if ra < rb {
            self.parent[rb] = ra;
        } else if rb < ra {
            self.parent[ra] = rb;
        }
    }
}

/// Groups `universe` into connected components of `pairs`. Singletons are
/// kept; each cluster's representative is its lexicographically smallest id.
pub fn cluster_duplicates<S: AsRef<str>>(pairs: &[DuplicatePair], universe: &[S]) -> Result<DuplicateClusters> {
    let mut ids: Vec<&str> = universe.iter().map(AsRef::as_ref).collect();
    ids.sort_unstable();
    ids.dedup();
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut dsu = DisjointSet::new(ids.len());
    for p in pairs {
        let a = *index.get(p.a.as_str()).ok_or_else(|| Error::UnknownId(p.a.clone()))?;
        let b = *index.get(p.b.as_str()).ok_or_else(|| Error::UnknownId(p.b.clone()))?;
        dsu.union(a, b);
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let root = dsu.find(i);
        groups.entry(root).or_default().push((*id).to_owned());
    }
    Ok(DuplicateClusters {
        clusters: groups
            .into_values()
            .map(|members| Cluster {
                representative: members[0].clone(),
                members,
            })
            .collect(),
    })
}

/// Keeps only items whose source image represents its cluster, in input order.
pub fn dedup_retain<T: SourceImage + Clone>(items: &[T], clusters: &DuplicateClusters) -> Result<Vec<T>> {
    let reps = clusters.representative_map();
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let src = item.source_image_id();
        match reps.get(src) {
            Some(&rep) if rep == src => out.push(item.clone()),
            Some(_) => {}
            None => return Err(Error::UnknownId(src.to_owned())),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{DualStore, EmbeddingStore, ItemRecord};
    use crate::testutil::random_unit_store;

    fn pair(a: &str, b: &str) -> DuplicatePair {
        DuplicatePair {
            a: a.into(),
            b: b.into(),
            avg_sim: 1.0,
        }
    }

    /// f32 rows whose f64 dot product is exactly `target`.
    fn rows_with_exact_dot(target: f64) -> ([f32; 4], [f32; 4]) {
        let h = target as f32;
        let rest = target - f64::from(h);
        let l1 = rest as f32;
        let l2 = (rest - f64::from(l1)) as f32;
        assert_eq!(f64::from(h) + f64::from(l1) + f64::from(l2), target);
        let a = [1.0, 2f32.powi(-12), 2f32.powi(-24), 0.0];
        let tail = (1.0 - f64::from(h).powi(2)).sqrt() as f32;
        let b = [h, l1 * 2f32.powi(12), l2 * 2f32.powi(24), tail];
        (a, b)
    }

    fn dual_from_rows(rows_a: &[[f32; 4]], rows_b: &[[f32; 4]]) -> DualStore {
        let recs: Vec<ItemRecord> = (0..rows_a.len())
            .map(|i| ItemRecord::whole_image(i as u64, format!("img-{i}"), "gallery"))
            .collect();
        let a = EmbeddingStore::from_parts(recs.clone(), rows_a.concat(), 4, true, "enc-a").unwrap();
        let b = EmbeddingStore::from_parts(recs, rows_b.concat(), 4, true, "enc-b").unwrap();
        DualStore::new(a, b).unwrap()
    }

    #[test]
    fn identical_originals_pair_at_one() {
        let v = [0.0f32, 1.0, 0.0, 0.0];
        let d = dual_from_rows(&[v, v, [1.0, 0.0, 0.0, 0.0]], &[v, v, [0.0, 0.0, 1.0, 0.0]]);
        let pairs = find_duplicate_pairs(Embeddings::Dual(&d), &DedupOptions::default()).unwrap();
        assert_eq!(pairs, vec![DuplicatePair { a: "img-0".into(), b: "img-1".into(), avg_sim: 1.0 }]);
    }

    #[test]
    fn exactly_at_threshold_is_not_a_duplicate() {
        let (a, b) = rows_with_exact_dot(0.99);
        assert_eq!(crate::knn::dot(&a, &b), 0.99);
        let d = dual_from_rows(&[a, b], &[a, b]);
        for prefilter in [false, true] {
            let opts = DedupOptions { prefilter, ..DedupOptions::default() };
            assert!(find_duplicate_pairs(Embeddings::Dual(&d), &opts).unwrap().is_empty());
        }
        let (a2, b2) = rows_with_exact_dot(0.990_000_1);
        let d = dual_from_rows(&[a2, b2], &[a2, b2]);
        assert_eq!(find_duplicate_pairs(Embeddings::Dual(&d), &DedupOptions::default()).unwrap().len(), 1);
    }

    #[test]
    fn crops_of_one_original_collapse_first() {
        let v = [0.0f32, 1.0, 0.0, 0.0];
        let mut d = dual_from_rows(&[v, v], &[v, v]);
        let mut recs = d.a().records().to_vec();
        recs[1].source_image_id = "img-0".into();
        let a = EmbeddingStore::from_parts(recs.clone(), d.a().as_slice().to_vec(), 4, true, "enc-a").unwrap();
        let b = EmbeddingStore::from_parts(recs, d.b().as_slice().to_vec(), 4, true, "enc-b").unwrap();
        d = DualStore::new(a, b).unwrap();
        assert_eq!(unique_originals(Embeddings::Dual(&d)), vec![0]);
        assert!(find_duplicate_pairs(Embeddings::Dual(&d), &DedupOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn prefilter_never_changes_the_pair_set() {
        let a = random_unit_store(120, 3, 1, 0, "enc-a");
        let b = random_unit_store(120, 3, 2, 0, "enc-b");
        let d = DualStore::new(a, b).unwrap();
        for t in [0.5, 0.9, 0.99] {
            let on = find_duplicate_pairs(Embeddings::Dual(&d), &DedupOptions { threshold: t, prefilter: true }).unwrap();
            let off = find_duplicate_pairs(Embeddings::Dual(&d), &DedupOptions { threshold: t, prefilter: false }).unwrap();
            assert_eq!(on, off);
        }
    }

    #[test]
    fn rejects_unnormalized_store() {
        let s = crate::testutil::random_store(3, 4, 1, 0);
        assert!(find_duplicate_pairs(Embeddings::Single(&s), &DedupOptions::default()).is_err());
    }

    #[test]
    fn chain_is_one_cluster() {
        let universe = ["A", "B", "C", "D", "E"];
        let c = cluster_duplicates(&[pair("A", "B"), pair("B", "C")], &universe).unwrap();
        let members: Vec<Vec<&str>> = c.clusters.iter().map(|c| c.members.iter().map(String::as_str).collect()).collect();
        assert_eq!(members, vec![vec!["A", "B", "C"], vec!["D"], vec!["E"]]);
        assert_eq!(c.representatives().collect::<Vec<_>>(), vec!["A", "D", "E"]);
        assert_eq!(c.removed_count(), 2);
    }

    #[test]
    fn no_pairs_means_singletons() {
        let c = cluster_duplicates(&[], &["x", "y", "z"]).unwrap();
        assert_eq!(c.clusters.len(), 3);
        assert!(c.clusters.iter().all(|c| c.members.len() == 1));
    }

    #[test]
    fn unknown_endpoint_is_rejected() {
        assert!(matches!(cluster_duplicates(&[pair("A", "Q")], &["A", "B"]), Err(Error::UnknownId(_))));
    }

    #[test]
    fn retain_keeps_representative_crops_in_order() {
        let crops: Vec<String> = ["b", "a", "b", "c", "a"].iter().map(|s| s.to_string()).collect();
        let c = cluster_duplicates(&[pair("a", "b")], &["a", "b", "c"]).unwrap();
        assert_eq!(dedup_retain(&crops, &c).unwrap(), vec!["a", "c", "a"]);
        let none = cluster_duplicates(&[], &["a", "b", "c"]).unwrap();
        assert_eq!(dedup_retain(&crops, &none).unwrap(), crops);
        assert!(dedup_retain(&["zz".to_string()], &none).is_err());
    }
}
