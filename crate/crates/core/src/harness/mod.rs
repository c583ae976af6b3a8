//! Experiment orchestration: configs, seed derivation, the replica worker
//! pool and run manifests.
//!
//! Replicas run in parallel, each with its own seed from [`derive_seed`], and
//! results are folded in replica order, so every output except the manifest's
//! wall time is independent of the thread count.

mod config;
mod experiments;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{Ensemble, Experiment, ExperimentConfig, Lambda, MAX_DIM};

use crate::chains::Dynamics;
use crate::error::{ArwError, Result};
use crate::rng::{absorb, key_of_str};
use crate::stabilizer::BudgetExceeded;

/// Seed for replica `replica` of the stream named `tag`.
pub fn derive_seed(master: u64, replica: u64, tag: &str) -> u64 {
    absorb(absorb(absorb(key_of_str("arw/seed"), master), replica), key_of_str(tag))
}

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetEvent {
    pub replica: u64,
    pub instructions: u64,
    pub moves: u64,
    pub exits: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub version: String,
    pub replica_seeds: Vec<u64>,
    pub wall_time_seconds: f64,
    pub budget_events: Vec<BudgetEvent>,
    pub files: Vec<FileEntry>,
    /// Headline metrics as `(key, value)` pairs.
    pub summary: Vec<(String, String)>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ArwError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| ArwError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
}

impl RunReport {
    pub fn budget_exceeded(&self) -> bool {
        !self.manifest.budget_events.is_empty()
    }

    pub fn summary(&self) -> &[(String, String)] {
        &self.manifest.summary
    }

    pub fn metric(&self, key: &str) -> Option<&str> {
        self.manifest.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Files written by a run, with their checksums.
pub(crate) struct Output {
    root: PathBuf,
    files: Vec<FileEntry>,
    events: Vec<BudgetEvent>,
}

impl Output {
    fn new(root: PathBuf) -> Self {
        Output { root, files: Vec::new(), events: Vec::new() }
    }

    pub(crate) fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| ArwError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| ArwError::io(&path, e))?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }
}

/// Shared state of one run.
pub(crate) struct Run<'a> {
    pub config: &'a ExperimentConfig,
    pub dynamics: Dynamics,
    pub seeds: Vec<u64>,
    pool: rayon::ThreadPool,
}

impl Run<'_> {
    /// Evaluate `f(replica, seed)` for every replica on the worker pool.
    /// Replicas that run out of budget are dropped and logged; any other
    /// error aborts the run (the first one in replica order is returned).
    /// If every replica ran out of budget the first such error is returned.
    pub(crate) fn replicas<T, F>(&self, out: &mut Output, f: F) -> Result<Vec<(u64, T)>>
    where
        T: Send,
        F: Fn(u64, u64) -> Result<T> + Sync,
    {
        let results: Vec<Result<T>> = self.pool.install(|| {
            self.seeds.par_iter().enumerate().map(|(i, &seed)| f(i as u64, seed)).collect()
        });
        let mut kept = Vec::with_capacity(results.len());
        let mut first_exhausted = None;
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(v) => kept.push((i as u64, v)),
                Err(ArwError::BudgetExceeded(b)) => {
                    out.events.push(event(i as u64, &b));
                    first_exhausted.get_or_insert(b);
                }
                Err(e) => return Err(e),
            }
        }
        match first_exhausted {
            Some(b) if kept.is_empty() => Err(ArwError::BudgetExceeded(b)),
            _ => Ok(kept),
        }
    }
}

pub(crate) fn event(replica: u64, b: &BudgetExceeded) -> BudgetEvent {
    BudgetEvent { replica, instructions: b.instructions, moves: b.moves, exits: b.exits }
}

/// Validate `config`, run its experiment, write CSV/PGM outputs and the
/// manifest into the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let dynamics = Dynamics::new(config.lambda.0, config.mode).with_budget(config.budget());
    dynamics.source(config.seed).map_err(|e| ArwError::Config(e.to_string()))?;
    let threads = config.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ArwError::Config(format!("cannot start worker pool: {e}")))?;
    let seeds = (0..config.replicas).map(|r| derive_seed(config.seed, r, config.experiment.name())).collect();
    let run = Run { config, dynamics, seeds, pool };

    let root = config.out_dir();
    std::fs::create_dir_all(&root).map_err(|e| ArwError::io(&root, e))?;
    let mut out = Output::new(root.clone());
    let start = Instant::now();
    let summary = match experiments::dispatch(&run, &mut out) {
        Ok(s) => s,
        // Nothing to aggregate, but the events and any partial files are kept.
        Err(ArwError::BudgetExceeded(_)) if !out.events.is_empty() => vec![("replicas".into(), "0".into())],
        Err(e) => return Err(e),
    };
    let manifest = RunManifest {
        config: config.clone(),
        version: VERSION.to_string(),
        replica_seeds: run.seeds.clone(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        budget_events: out.events,
        files: out.files,
        summary,
    };
    write_atomically(&root.join("manifest.json"), &serde_json::to_vec_pretty(&manifest).unwrap())?;
    Ok(RunReport { out_dir: root, manifest })
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| ArwError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| ArwError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| ArwError::io(path, e))
}

/// Recompute checksums of the files listed in a manifest; returns the paths
/// that are missing or differ.
pub fn verify_manifest(out_dir: &Path, manifest: &RunManifest) -> Vec<String> {
    manifest
        .files
        .iter()
        .filter(|f| match std::fs::read(out_dir.join(&f.path)) {
            Ok(bytes) => hex::encode(Sha256::digest(&bytes)) != f.sha256,
            Err(_) => true,
        })
        .map(|f| f.path.clone())
        .collect()
}
