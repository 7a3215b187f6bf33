use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{run_trial, ExperimentBase, GridSpec, HarnessError, TrialConfig, TrialPoint, TrialRecord};
use crate::data::TaskSplits;

const MANIFEST_FORMAT: &str = "fairtransfer-grid/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridOptions {
    /// Trials run in parallel on this many threads.
    pub workers: usize,
    /// Manifest, per-trial configs and checkpoints go here; nothing is
    /// written and nothing is resumed when absent.
    pub out_dir: Option<PathBuf>,
    pub save_checkpoints: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            out_dir: None,
            save_checkpoints: true,
        }
    }
}

/// Experiment manifest: every trial ever run in this directory, keyed by
/// the hash of its config and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub grid: GridSpec,
    pub base: ExperimentBase,
    pub trials: BTreeMap<String, ManifestEntry>,
}

pub type ManifestEntry = TrialRecord;

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| HarnessError::io(path, e))?;
        if m.format != MANIFEST_FORMAT {
            return Err(HarnessError::io(path, format!("unsupported format `{}`", m.format)));
        }
        Ok(m)
    }

    fn write(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text + "\n").map_err(|e| HarnessError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
    }
}

/// sha256 over the trial config and the content digests of its data.
pub(crate) fn trial_hash(config: &TrialConfig, digests: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for d in digests {
        h.update(b"\n");
        h.update(d.as_bytes());
    }
    hex::encode(h.finalize())
}

fn trial_dir(out: &Path, hash: &str) -> PathBuf {
    out.join("trials").join(&hash[..16])
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

fn execute(
    index: usize,
    point: &TrialPoint,
    config: &TrialConfig,
    hash: &str,
    data: &[TaskSplits],
    options: &GridOptions,
) -> TrialRecord {
    let start = Instant::now();
    log::info!("trial {index} ({})", &hash[..16]);
    let mut record = TrialRecord {
        index,
        hash: hash.to_string(),
        point: *point,
        status: TrialStatus::Failed,
        error: None,
        dev: BTreeMap::new(),
        test: BTreeMap::new(),
        checkpoint: None,
        wall_clock_secs: 0.0,
    };
    let result = (|| -> Result<(), HarnessError> {
        let dir = options.out_dir.as_ref().map(|o| trial_dir(o, hash));
        if let Some(dir) = &dir {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
            write_json(&dir.join("config.json"), config)?;
        }
        let outcome = run_trial(config, data)?;
        if let (Some(dir), true) = (&dir, options.save_checkpoints) {
            let path = dir.join("model.json");
            outcome.model.save(&path)?;
            let rel = path
                .strip_prefix(options.out_dir.as_ref().expect("dir implies out_dir"))
                .unwrap_or(&path);
            record.checkpoint = Some(rel.display().to_string());
        }
        record.dev = outcome.dev;
        record.test = outcome.test;
        Ok(())
    })();
    match result {
        Ok(()) => record.status = TrialStatus::Completed,
        Err(e) => {
            log::warn!("trial {index} failed: {e}");
            record.error = Some(e.to_string());
        }
    }
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    record
}

/// Runs one trial per grid point. Trials already completed in the output
/// directory's manifest under the same hash are reused, failed trials are
/// recorded and the grid continues. Records come back in grid order.
pub fn grid_search(
    grid: &GridSpec,
    base: &ExperimentBase,
    data: &[TaskSplits],
    options: &GridOptions,
) -> Result<Vec<TrialRecord>, HarnessError> {
    grid.validate()?;
    let points = grid.points();
    log::info!("grid of {} trial(s)", points.len());
    let digests: Vec<String> = data.iter().map(TaskSplits::digest).collect();
    let configs: Vec<TrialConfig> = points.iter().map(|p| p.config(base)).collect();
    let hashes: Vec<String> = configs.iter().map(|c| trial_hash(c, &digests)).collect();

    let manifest_path = options.out_dir.as_ref().map(|o| o.join(MANIFEST_FILE));
    let mut manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        grid: grid.clone(),
        base: base.clone(),
        trials: BTreeMap::new(),
    };
    if let Some(path) = &manifest_path {
        let dir = path.parent().expect("manifest has a parent");
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        if path.exists() {
            manifest.trials = Manifest::load(path)?.trials;
        }
    }

    let mut records: Vec<Option<TrialRecord>> = hashes
        .iter()
        .enumerate()
        .map(|(i, h)| {
            manifest
                .trials
                .get(h)
                .filter(|r| r.completed())
                .map(|r| TrialRecord { index: i, ..r.clone() })
        })
        .collect();
    let pending: Vec<usize> = (0..points.len()).filter(|&i| records[i].is_none()).collect();
    log::info!(
        "{} trial(s) to run, {} reused",
        pending.len(),
        points.len() - pending.len()
    );
    if let Some(path) = &manifest_path {
        manifest.write(path)?;
    }

    let writer = Mutex::new((manifest, None::<HarnessError>));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
    let fresh: Vec<TrialRecord> = pool.install(|| {
        pending
            .par_iter()
            .map(|&i| {
                let rec = execute(i, &points[i], &configs[i], &hashes[i], data, options);
                if let Some(path) = &manifest_path {
                    let mut guard = writer.lock().expect("manifest writer");
                    guard.0.trials.insert(rec.hash.clone(), rec.clone());
                    if let Err(e) = guard.0.write(path) {
                        guard.1.get_or_insert(e);
                    }
                }
                rec
            })
            .collect()
    });
    if let Some(e) = writer.into_inner().expect("manifest writer").1 {
        return Err(e);
    }
    for rec in fresh {
        let i = rec.index;
        records[i] = Some(rec);
    }
    Ok(records.into_iter().map(|r| r.expect("every trial ran")).collect())
}
