use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use transfer_curate::curation::Strategy;
use transfer_curate::fixture::ClusterFixture;
use transfer_curate::losses::gradcheck::{run_suite, CASES_PER_OP, REL_TOL};
use transfer_curate::pipeline::{self, BuildStoreOptions, PipelineConfig, StorePaths};
use transfer_curate::{Error, Metric, Result};

#[derive(Parser)]
#[command(name = "transfer-curate", version, about = "Curate retrieval-augmented transfer sets from embedding stores")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a store from a headerless CSV of vectors.
    BuildStore {
        #[arg(long)]
        csv: PathBuf,
        /// JSONL item records, one per CSV row.
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "unknown")]
        encoder: String,
        /// L2-normalize rows and mark the store normalized.
        #[arg(long)]
        normalize: bool,
        /// Split tag for generated records when --meta is not given.
        #[arg(long, default_value = "gallery")]
        split_tag: String,
    },
    /// Check a store (or the two halves of a dual store).
    Validate { store: PathBuf, store_b: Option<PathBuf> },
    /// Select gallery items and write curation.json.
    Curate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// De-duplicate and flag contamination; writes hygiene.json and contamination.json.
    Hygiene {
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to the manifest's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply reviewed contamination statuses and write final.json.
    Finalize {
        /// hygiene.json
        #[arg(long)]
        manifest: PathBuf,
        /// The reviewed contamination report.
        #[arg(long)]
        confirmations: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attribution, rank and cluster-size summaries.
    Stats {
        /// curation.json
        #[arg(long)]
        manifest: PathBuf,
        /// hygiene.json, for cluster sizes.
        #[arg(long)]
        hygiene: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Sample crop rectangles for a CSV of `source_image_id,width,height`.
    PlanCrops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// JSONL output, one crop per line.
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss-kernel utilities.
    Losses {
        #[command(subcommand)]
        command: LossesCommand,
    },
    /// Write the synthetic cluster fixture (stores and config) into a directory.
    Fixture {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum LossesCommand {
    /// Finite-difference check of every analytic gradient.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = CASES_PER_OP)]
        cases: usize,
    },
}

/// Flags that override keys of the JSON config.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    query: Option<PathBuf>,
    #[arg(long)]
    query_b: Option<PathBuf>,
    #[arg(long)]
    gallery: Option<PathBuf>,
    #[arg(long)]
    gallery_b: Option<PathBuf>,
    #[arg(long)]
    originals: Option<PathBuf>,
    #[arg(long)]
    originals_b: Option<PathBuf>,
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    task_b: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(short, long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    include_queries: Option<bool>,
    #[arg(long)]
    exclude_task_items: Option<bool>,
    #[arg(long)]
    exclude_self: Option<bool>,
    #[arg(long)]
    block_size: Option<usize>,
}

impl Overrides {
    fn apply(self, threads: Option<usize>) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        let stores = &mut cfg.stores;
        for (slot, a, b) in [
            (&mut stores.query, self.query, self.query_b),
            (&mut stores.gallery, self.gallery, self.gallery_b),
            (&mut stores.originals, self.originals, self.originals_b),
            (&mut stores.task, self.task, self.task_b),
        ] {
            match (a, b) {
                (Some(a), b) => *slot = Some(StorePaths { a, b }),
                (None, Some(_)) => return Err(Error::invalid("a second-encoder store needs its first-encoder store")),
                (None, None) => {}
            }
        }
        macro_rules! set {
            ($($field:ident => $target:expr),*) => {$(
                if let Some(v) = self.$field {
                    $target = v;
                }
            )*};
        }
        set!(strategy => cfg.strategy, metric => cfg.metric, n => cfg.n, seed => cfg.seed,
            include_queries => cfg.include_queries, exclude_task_items => cfg.exclude_task_items,
            exclude_self => cfg.exclude_self, block_size => cfg.runtime.block_size);
        if threads.is_some() {
            cfg.runtime.threads = threads;
        }
        Ok(cfg)
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_owned(),
        _ => PathBuf::from("."),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_images(path: &Path) -> Result<Vec<(String, u32, u32)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::invalid(format!("{} row {i}: {e}", path.display()))))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(e.to_string()))?;
    }
    match cli.command {
        Command::BuildStore {
            csv,
            meta,
            out,
            encoder,
            normalize,
            split_tag,
        } => {
            let s = pipeline::build_store(&BuildStoreOptions {
                csv,
                meta,
                out,
                encoder_id: encoder,
                normalize,
                split_tag,
            })?;
            println!(
                "count={} dim={} normalized={} norm min={:.6} mean={:.6} max={:.6}",
                s.count, s.dim, s.normalized, s.norm_min, s.norm_mean, s.norm_max
            );
        }
        Command::Validate { store, store_b } => {
            let summaries = pipeline::validate_store(&StorePaths { a: store, b: store_b })?;
            for s in &summaries {
                println!("{}: count={} dim={} normalized={}", s.encoder_id, s.count, s.dim, s.normalized);
            }
            println!("OK");
        }
        Command::Curate { overrides, out } => {
            let cfg = overrides.apply(cli.threads)?;
            let m = pipeline::run_curate(&cfg, &out)?;
            println!(
                "strategy={} selected={} k_final={} digest={}",
                m.strategy,
                m.selected.len(),
                m.k_final,
                m.digests.content
            );
        }
        Command::Hygiene { manifest, out } => {
            let out = out.unwrap_or_else(|| parent_dir(&manifest));
            let h = pipeline::run_hygiene(&manifest, &out)?;
            let c = &h.counts;
            println!(
                "retrieved={} unique_originals={} duplicate_clusters={} removed_by_dedup={} flagged={}",
                c.retrieved, c.unique_originals, c.duplicate_clusters, c.removed_by_dedup, c.flagged
            );
            if c.flagged > 0 {
                println!(
                    "review {} and set each status to confirmed-leak or cleared",
                    out.join(pipeline::REPORT_FILE).display()
                );
            }
        }
        Command::Finalize {
            manifest,
            confirmations,
            out,
        } => {
            let out = out.unwrap_or_else(|| parent_dir(&manifest));
            let m = pipeline::run_finalize(&manifest, &confirmations, &out)?;
            let c = &m.counts;
            println!(
                "final={} retrieved={} removed_by_dedup={} removed_by_confirmation={} queries={} overlaps={} digest={}",
                c.final_size,
                c.retrieved,
                c.removed_by_dedup,
                c.removed_by_confirmation,
                c.queries,
                c.query_overlaps,
                m.digests.content
            );
        }
        Command::Stats { manifest, hygiene, json } => {
            let s = pipeline::stats(&manifest, hygiene.as_deref())?;
            if json {
                return print_json(&s);
            }
            println!("strategy {}  selected {}  k_final {}  dropped {}", s.strategy, s.selected, s.k_final, s.dropped);
            println!("items per query:");
            for (q, n) in &s.per_query {
                println!("  {q:>12} {n:>6} {}", "#".repeat((*n).min(60)));
            }
            println!("rank distribution:");
            for (r, n) in &s.rank_distribution {
                println!("  rank {r:>6} {n:>6}");
            }
            if let Some(sizes) = &s.cluster_sizes {
                println!("duplicate cluster sizes:");
                for (size, n) in sizes {
                    println!("  size {size:>6} {n:>6}");
                }
            }
        }
        Command::PlanCrops {
            config,
            images,
            seed,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let crops = pipeline::plan_crops(&cfg, &read_images(&images)?)?;
            let mut text = String::new();
            for c in &crops {
                text.push_str(&serde_json::to_string(c)?);
                text.push('\n');
            }
            std::fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
            println!("wrote {} crops", crops.len());
        }
        Command::Losses {
            command: LossesCommand::Check { seed, cases },
        } => {
            let rows = run_suite(seed, cases);
            println!("{:<26} {:>6} {:>14}  result (tolerance {REL_TOL:e})", "op", "cases", "max rel err");
            for r in &rows {
                println!(
                    "{:<26} {:>6} {:>14.3e}  {}",
                    r.op,
                    r.cases,
                    r.max_rel_error,
                    if r.passed { "PASS" } else { "FAIL" }
                );
            }
            let failed = rows.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Error::invalid(format!("{failed} gradient checks failed")));
            }
        }
        Command::Fixture { out } => {
            let cfg = ClusterFixture::default().write(&out)?;
            println!("wrote fixture config {}", cfg.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
