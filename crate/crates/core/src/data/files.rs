use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{load_jsonl, write_jsonl, BiasSpec, DataError, Split, SyntheticPair, TaskDataset, TaskSpec};

const MANIFEST_FORMAT: &str = "fairtransfer-data/1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One JSONL file of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub spec: TaskSpec,
    pub examples: usize,
    pub sha256: String,
}

/// Index of a dataset directory: the files of every task and split, plus the
/// generator settings when the data is synthetic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasSpec>,
    pub tasks: BTreeMap<String, BTreeMap<Split, FileEntry>>,
}

/// Train, dev and (optionally) test data of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplits {
    pub train: TaskDataset,
    pub dev: TaskDataset,
    pub test: Option<TaskDataset>,
}

impl TaskSplits {
    pub fn name(&self) -> &str {
        &self.train.spec.name
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for ds in [Some(&self.train), Some(&self.dev), self.test.as_ref()]
            .into_iter()
            .flatten()
        {
            h.update(ds.digest().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn file_digest(path: &Path) -> Result<String, DataError> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Writes `{task}.{split}.jsonl` for both tasks and all splits, training
/// splits restricted to their annotated attributes, plus `manifest.json`.
pub fn write_synthetic_dir(dir: &Path, pair: &SyntheticPair) -> Result<DatasetManifest, DataError> {
    std::fs::create_dir_all(dir)?;
    let mut tasks = BTreeMap::new();
    for task in pair.tasks() {
        let mut files = BTreeMap::new();
        for split in Split::ALL {
            let ds = task.published(split);
            let name = format!("{}.{}.jsonl", task.rule.name, split);
            let path = dir.join(&name);
            write_jsonl(&path, &ds)?;
            files.insert(
                split,
                FileEntry {
                    path: name,
                    spec: ds.spec.clone(),
                    examples: ds.len(),
                    sha256: file_digest(&path)?,
                },
            );
        }
        tasks.insert(task.rule.name.clone(), files);
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.to_string(),
        bias: Some(pair.spec.clone()),
        tasks,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| DataError::Config(format!("{}: {e}", path.display())))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DataError::Config(format!("{}: {e}", path.display())))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(DataError::Config(format!(
            "{}: unsupported format `{}`",
            path.display(),
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Loads one task of a dataset directory. Train and dev files are required.
pub fn load_task_dir(dir: &Path, manifest: &DatasetManifest, task: &str) -> Result<TaskSplits, DataError> {
    let files = manifest
        .tasks
        .get(task)
        .ok_or_else(|| DataError::Config(format!("task `{task}` is not in the dataset manifest")))?;
    let load = |split: Split| -> Result<Option<TaskDataset>, DataError> {
        let Some(entry) = files.get(&split) else {
            return Ok(None);
        };
        let ds = load_jsonl(dir.join(&entry.path), &entry.spec, split)?;
        if ds.spec.name != task {
            return Err(DataError::Config(format!(
                "{} holds task `{}`, expected `{task}`",
                entry.path, ds.spec.name
            )));
        }
        Ok(Some(ds))
    };
    let missing = |split: Split| DataError::Config(format!("task `{task}` has no {split} file"));
    Ok(TaskSplits {
        train: load(Split::Train)?.ok_or_else(|| missing(Split::Train))?,
        dev: load(Split::Dev)?.ok_or_else(|| missing(Split::Dev))?,
        test: load(Split::Test)?,
    })
}
