use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curation::{CropParams, CurationRequest, Strategy};
use crate::error::{Error, Result};
use crate::hygiene::{DECONTAM_THRESHOLD, DEDUP_THRESHOLD, EVIDENCE_K};
use crate::knn::{Metric, DEFAULT_BLOCK_SIZE};
use crate::rng::GENERATOR_ID;
use crate::store::StoreSet;

/// A single store, or the two halves of a dual store.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorePaths {
    pub a: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<PathBuf>,
}

impl StorePaths {
    pub fn single(a: impl Into<PathBuf>) -> Self {
        StorePaths { a: a.into(), b: None }
    }

    pub fn dual(a: impl Into<PathBuf>, b: impl Into<PathBuf>) -> Self {
        StorePaths {
            a: a.into(),
            b: Some(b.into()),
        }
    }

    pub fn files(&self) -> impl Iterator<Item = &Path> {
        std::iter::once(self.a.as_path()).chain(self.b.as_deref())
    }

    pub fn open(&self) -> Result<StoreSet> {
        StoreSet::open(&self.a, self.b.as_deref())
    }

    /// Resolves relative paths against `base`.
    fn rebase(&mut self, base: &Path) {
        for p in std::iter::once(&mut self.a).chain(self.b.as_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query: Option<StorePaths>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gallery: Option<StorePaths>,
    /// Whole-image features of gallery source images; the gallery itself when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub originals: Option<StorePaths>,
    /// Target-task images (all splits) scanned for contamination.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<StorePaths>,
}

impl StoreConfig {
    pub fn roles(&self) -> impl Iterator<Item = (&'static str, &StorePaths)> {
        [
            ("query", &self.query),
            ("gallery", &self.gallery),
            ("originals", &self.originals),
            ("task", &self.task),
        ]
        .into_iter()
        .filter_map(|(role, p)| p.as_ref().map(|p| (role, p)))
    }

    pub fn require(&self, role: &str) -> Result<&StorePaths> {
        let p = match role {
            "query" => &self.query,
            "gallery" => &self.gallery,
            "originals" => &self.originals,
            "task" => &self.task,
            _ => &None,
        };
        p.as_ref()
            .ok_or_else(|| Error::invalid(format!("config has no {role} store")))
    }
}

/// Knobs that may change how fast a run is but never what it produces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub threads: Option<usize>,
    pub block_size: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            threads: None,
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stores: StoreConfig,
    pub strategy: Strategy,
    pub metric: Metric,
    /// Number of gallery items to retrieve.
    pub n: usize,
    pub seed: u64,
    pub include_queries: bool,
    pub exclude_task_items: bool,
    pub exclude_self: bool,
    pub dedup_threshold: f64,
    pub dedup_prefilter: bool,
    pub decontam_threshold: f64,
    pub evidence_k: usize,
    pub crop: CropParams,
    pub generator: String,
    pub runtime: RuntimeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stores: StoreConfig::default(),
            strategy: Strategy::QueryBalanced,
            metric: Metric::Euclidean,
            n: 0,
            seed: 0,
            include_queries: true,
            exclude_task_items: true,
            exclude_self: false,
            dedup_threshold: DEDUP_THRESHOLD,
            dedup_prefilter: true,
            decontam_threshold: DECONTAM_THRESHOLD,
            evidence_k: EVIDENCE_K,
            crop: CropParams::default(),
            generator: GENERATOR_ID.to_owned(),
            runtime: RuntimeConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config; relative store paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)?;
        if let Some(dir) = path.parent() {
            for p in [
                &mut cfg.stores.query,
                &mut cfg.stores.gallery,
                &mut cfg.stores.originals,
                &mut cfg.stores.task,
            ]
            .into_iter()
            .flatten()
            {
                p.rebase(dir);
            }
        }
        Ok(cfg)
    }

    /// Checks value ranges and that every referenced store file exists.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n must be at least 1"));
        }
        for (name, t) in [
            ("dedup_threshold", self.dedup_threshold),
            ("decontam_threshold", self.decontam_threshold),
        ] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1], got {t}")));
            }
        }
        if self.evidence_k == 0 {
            return Err(Error::invalid("evidence_k must be at least 1"));
        }
        if self.runtime.block_size == 0 {
            return Err(Error::invalid("block_size must be at least 1"));
        }
        if self.runtime.threads == Some(0) {
            return Err(Error::invalid("threads must be at least 1"));
        }
        if self.generator != GENERATOR_ID {
            return Err(Error::invalid(format!(
                "unsupported generator {:?}; this build provides {GENERATOR_ID:?}",
                self.generator
            )));
        }
        self.crop.validate()?;
        for (role, paths) in self.stores.roles() {
            for f in paths.files() {
                if !f.is_file() {
                    return Err(Error::invalid(format!("{role} store {} does not exist", f.display())));
                }
            }
        }
        Ok(())
    }

    pub fn request(&self) -> CurationRequest {
        CurationRequest {
            n: self.n,
            strategy: self.strategy,
            metric: self.metric,
            seed: self.seed,
            include_queries: self.include_queries,
            exclude_task_items: self.exclude_task_items,
            exclude_self: self.exclude_self,
            block_size: self.runtime.block_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_constants() {
        let c = PipelineConfig::default();
        assert_eq!(c.dedup_threshold, 0.99);
        assert_eq!(c.decontam_threshold, 0.95);
        assert_eq!(c.crop.scale, (0.08, 1.0));
        assert_eq!(c.crop.crops_per_image, 10);
        assert_eq!(c.crop.out_size, 224);
        assert_eq!(c.evidence_k, 5);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: PipelineConfig = serde_json::from_str(r#"{"n": 12, "strategy": "random", "stores": {"gallery": {"a": "g.tsf"}}}"#).unwrap();
        assert_eq!(c.n, 12);
        assert_eq!(c.strategy, Strategy::Random);
        assert_eq!(c.dedup_threshold, 0.99);
        assert_eq!(c.stores.gallery, Some(StorePaths::single("g.tsf")));
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"nn": 1}"#).is_err());
    }

    #[test]
    fn validation_rejects_out_of_range_values() {
        let ok = PipelineConfig {
            n: 5,
            ..PipelineConfig::default()
        };
        ok.validate().unwrap();
        for bad in [
            PipelineConfig { n: 0, ..ok.clone() },
            PipelineConfig { dedup_threshold: 1.5, ..ok.clone() },
            PipelineConfig { decontam_threshold: 0.0, ..ok.clone() },
            PipelineConfig { generator: "mt19937".into(), ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        let missing = PipelineConfig {
            stores: StoreConfig {
                gallery: Some(StorePaths::single("/nonexistent/g.tsf")),
                ..StoreConfig::default()
            },
            ..ok
        };
        assert!(missing.validate().is_err());
    }
}
