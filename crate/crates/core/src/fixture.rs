//! Synthetic Gaussian-cluster stores for demos and end-to-end tests.
//!
//! Every point is `normalize(center + noise)`; gallery images come from all
//! clusters, queries and task images only from `query_clusters`. Source image
//! ids encode the cluster as `c{cluster}-...` so selections can be audited.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::{write_json, PipelineConfig, StoreConfig, StorePaths};
use crate::rng::{SeededRng, STREAM_FIXTURE};
use crate::store::{EmbeddingStore, ItemRecord};

pub const QUERY_ID_BASE: u64 = 1_000_000;
pub const TASK_ID_BASE: u64 = 2_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterFixture {
    pub clusters: usize,
    pub dim: usize,
    pub gallery_per_cluster: usize,
    pub query_clusters: Vec<usize>,
    pub queries_per_cluster: usize,
    pub task_per_cluster: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ClusterFixture {
    fn default() -> Self {
        ClusterFixture {
            clusters: 10,
            dim: 64,
            gallery_per_cluster: 200,
            query_clusters: vec![0, 1, 2],
            queries_per_cluster: 5,
            task_per_cluster: 4,
            noise: 1.0,
            seed: 42,
        }
    }
}

pub struct FixtureStores {
    pub queries: EmbeddingStore,
    pub gallery: EmbeddingStore,
    pub task: EmbeddingStore,
}

/// Cluster index encoded in a fixture `source_image_id`.
pub fn cluster_of(source_image_id: &str) -> Option<usize> {
    source_image_id.strip_prefix('c')?.split('-').next()?.parse().ok()
}

impl ClusterFixture {
    pub fn generate(&self) -> Result<FixtureStores> {
        if self.clusters == 0 || self.dim == 0 {
            return Err(Error::invalid("fixture needs at least one cluster and one dimension"));
        }
        if let Some(&c) = self.query_clusters.iter().find(|&&c| c >= self.clusters) {
            return Err(Error::invalid(format!("query cluster {c} out of range")));
        }
        let mut rng = SeededRng::new(self.seed, STREAM_FIXTURE);
        let centers: Vec<Vec<f64>> = (0..self.clusters)
            .map(|_| (0..self.dim).map(|_| rng.normal()).collect())
            .collect();
        let mut draw = |c: usize| -> Vec<f32> {
            let v: Vec<f64> = centers[c].iter().map(|&m| m + self.noise * rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / norm) as f32).collect()
        };

        let mut gallery = (Vec::new(), Vec::new());
        for c in 0..self.clusters {
            for j in 0..self.gallery_per_cluster {
                let id = (c * self.gallery_per_cluster + j) as u64;
                gallery.0.push(ItemRecord::whole_image(id, format!("c{c}-g{j}"), "gallery"));
                gallery.1.extend(draw(c));
            }
        }
        let mut queries = (Vec::new(), Vec::new());
        let mut task = (Vec::new(), Vec::new());
        for &c in &self.query_clusters {
            for j in 0..self.queries_per_cluster {
                let id = QUERY_ID_BASE + queries.0.len() as u64;
                queries.0.push(ItemRecord::whole_image(id, format!("c{c}-q{j}"), "query"));
                queries.1.extend(draw(c));
            }
            for j in 0..self.task_per_cluster {
                let id = TASK_ID_BASE + task.0.len() as u64;
                let split = if j % 2 == 0 { "task-train" } else { "task-test" };
                task.0.push(ItemRecord::whole_image(id, format!("c{c}-t{j}"), split));
                task.1.extend(draw(c));
            }
        }

        let encoder = format!("gaussian-clusters-{}d", self.dim);
        Ok(FixtureStores {
            queries: EmbeddingStore::from_parts(queries.0, queries.1, self.dim, true, encoder.clone())?,
            gallery: EmbeddingStore::from_parts(gallery.0, gallery.1, self.dim, true, encoder.clone())?,
            task: EmbeddingStore::from_parts(task.0, task.1, self.dim, true, encoder)?,
        })
    }

    /// Writes the three stores plus a `config.json` (query-balanced, N = 300,
    /// seed 42, Euclidean) that refers to them by relative path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stores = self.generate()?;
        stores.queries.write(&dir.join("query.tsf"))?;
        stores.gallery.write(&dir.join("gallery.tsf"))?;
        stores.task.write(&dir.join("task.tsf"))?;
        let cfg = PipelineConfig {
            stores: StoreConfig {
                query: Some(StorePaths::single("query.tsf")),
                gallery: Some(StorePaths::single("gallery.tsf")),
                originals: None,
                task: Some(StorePaths::single("task.tsf")),
            },
            n: 300,
            seed: 42,
            ..PipelineConfig::default()
        };
        let path = dir.join("config.json");
        write_json(&path, &cfg)?;
        Ok(path)
    }
}
