use std::path::{Path, PathBuf};

use fairtransfer::data::{BiasSpec, Split};
use fairtransfer::eval::EvalOptions;
use fairtransfer::fairness::FairnessConfig;
use fairtransfer::harness::{
    DataSource, ExperimentBase, GridSpec, ModelConfig, Pipeline, SelectionMode, TaskSelection, TrialConfig,
};
use fairtransfer::objectives::{ObjectiveSpec, Variant};
use fairtransfer::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// The whole configuration document. Every command reads the sections it
/// needs and ignores the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces `synth.seed`, `train.seed`, `grid.seeds` and the
    /// seed of synthetic `data`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub synth: BiasSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSource>,
    pub tasks: TaskSelection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub objective: ObjectiveSpec,
    pub pipeline: Pipeline,
    pub freeze_encoder: bool,
    pub eval: EvalOptions,
    /// Penalty settings the grid does not vary.
    pub fairness: FairnessConfig,
    pub grid: GridSpec,
    pub selection: SelectConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            synth: BiasSpec::transfer_default(),
            data: None,
            tasks: TaskSelection::single("a"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            objective: ObjectiveSpec::base(Variant::StlBase),
            pipeline: Pipeline::Joint,
            freeze_encoder: false,
            eval: EvalOptions::default(),
            fairness: FairnessConfig::default(),
            grid: GridSpec::new(Variant::StlBase),
            selection: SelectConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectConfig {
    /// Grid manifest to choose from; `<out>/manifest.json` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub mode: SelectionMode,
    pub target: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auxiliary: Option<String>,
    /// Reference dev F1 for the fair modes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
    /// Manifest of the base variant's grid; its performance-selected trial
    /// provides the reference when `reference` is absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_manifest: Option<PathBuf>,
    pub threshold: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            mode: SelectionMode::Performance,
            target: "a".into(),
            auxiliary: None,
            reference: None,
            reference_manifest: None,
            threshold: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMethod {
    pub name: String,
    /// `selection.json` written by the `select` command.
    pub selection: PathBuf,
    /// Grid manifest for the plot series; optional.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub target: String,
    pub methods: Vec<ReportMethod>,
    pub per_group: bool,
    pub split: Split,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            target: "a".into(),
            methods: Vec::new(),
            per_group: false,
            split: Split::Test,
        }
    }
}

impl RunConfig {
    /// Defaults, then the file, then `key=value` overrides (dotted paths),
    /// then the seed flag.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut doc = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let parsed: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut doc, parsed);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        if let Some(s) = seed {
            doc["seed"] = Value::from(s);
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(s) = cfg.seed {
            cfg.synth.seed = s;
            cfg.train.seed = s;
            cfg.grid.seeds = vec![s];
            if let Some(DataSource::Synthetic(b)) = &mut cfg.data {
                b.seed = s;
            }
        }
        Ok(cfg)
    }

    /// `data`, or the `synth` section generated in memory.
    pub fn data_source(&self) -> DataSource {
        self.data
            .clone()
            .unwrap_or_else(|| DataSource::Synthetic(self.synth.clone()))
    }

    pub fn trial(&self) -> TrialConfig {
        TrialConfig {
            data: self.data_source(),
            tasks: self.tasks.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            objective: self.objective.clone(),
            pipeline: self.pipeline,
            freeze_encoder: self.freeze_encoder,
            eval: self.eval.clone(),
        }
    }

    pub fn experiment(&self) -> ExperimentBase {
        ExperimentBase {
            data: self.data_source(),
            tasks: self.tasks.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            fairness: self.fairness,
            eval: self.eval.clone(),
        }
    }
}

/// Recursive object merge; anything else in `top` replaces `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, top) => *slot = top,
    }
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a string.
fn apply_override(doc: &mut Value, text: &str) -> Result<(), CliError> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{text}` is not KEY=VALUE")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override `{text}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::from(raw));
    let mut node = doc;
    for key in path.split('.') {
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        node = node
            .as_object_mut()
            .expect("object")
            .entry(key.to_string())
            .or_insert(Value::Null);
    }
    *node = value;
    Ok(())
}
