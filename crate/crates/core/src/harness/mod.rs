//! Grid search over training configurations, model selection, experiment
//! manifests, and method-by-metric report tables.

mod grid;
mod report;
mod select;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_task_dir, read_manifest, synthesize, BiasSpec, DataError, TaskSplits};
use crate::eval::{evaluate, EvalError, EvalOptions, EvalReport};
use crate::fairness::FairnessConfig;
use crate::model::{init_model, Activation, EncoderSpec, InputMode, ModelError, ModelParams, ENCODER};
use crate::objectives::{burn_in_fraction, ObjectiveError, ObjectiveSpec, Variant};
use crate::training::{stilt_train, train, Scheduler, StiltConfig, TaskData, TrainConfig, TrainError, TrainHistory};

pub use grid::{grid_search, GridOptions, Manifest, ManifestEntry, TrialStatus, MANIFEST_FILE};
pub use report::{emit_report, frontier_csv, lambda_csv, ReportOptions, ReportRow, ReportTable};
pub use select::{select_best, NearMiss, Selection, SelectionCriteria, SelectionMode};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(
        "no trial keeps {threshold} x {reference:.4} dev F1 on `{task}`; closest: {}",
        near_misses.iter().map(|m| format!("#{} ({:.4})", m.index, m.macro_f1)).collect::<Vec<_>>().join(", ")
    )]
    NoQualifyingTrial {
        task: String,
        reference: f64,
        threshold: f64,
        near_misses: Vec<NearMiss>,
    },
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

impl HarnessError {
    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        }
    }
}

/// Where a trial's datasets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in memory from a bias spec.
    Synthetic(BiasSpec),
    /// A directory written by the `synth` command (or laid out the same way).
    Directory(PathBuf),
}

/// The trained tasks, target first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSelection {
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auxiliary: Option<String>,
    /// Train the target with every generator-known attribute instead of its
    /// annotated view. Synthetic data only.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub oracle_target: bool,
}

impl TaskSelection {
    pub fn single(target: &str) -> Self {
        Self {
            target: target.to_string(),
            auxiliary: None,
            oracle_target: false,
        }
    }

    pub fn pair(target: &str, auxiliary: &str) -> Self {
        Self {
            target: target.to_string(),
            auxiliary: Some(auxiliary.to_string()),
            oracle_target: false,
        }
    }

    pub fn names(&self) -> Vec<&str> {
        std::iter::once(self.target.as_str())
            .chain(self.auxiliary.as_deref())
            .collect()
    }
}

/// Loads the selected tasks in selection order.
pub fn load_data(source: &DataSource, tasks: &TaskSelection) -> Result<Vec<TaskSplits>, HarnessError> {
    match source {
        DataSource::Synthetic(bias) => {
            let pair = synthesize(bias)?;
            tasks
                .names()
                .into_iter()
                .map(|name| {
                    let task = pair
                        .tasks()
                        .into_iter()
                        .find(|t| t.rule.name == name)
                        .ok_or_else(|| HarnessError::Config(format!("no synthetic task `{name}`")))?;
                    let train = if tasks.oracle_target && name == tasks.target {
                        task.train.clone()
                    } else {
                        task.training_view()
                    };
                    Ok(TaskSplits {
                        train,
                        dev: task.dev.clone(),
                        test: Some(task.test.clone()),
                    })
                })
                .collect()
        }
        DataSource::Directory(dir) => {
            if tasks.oracle_target {
                return Err(HarnessError::Config("oracle_target needs synthetic data".into()));
            }
            let manifest = read_manifest(dir)?;
            tasks
                .names()
                .into_iter()
                .map(|name| Ok(load_task_dir(dir, &manifest, name)?))
                .collect()
        }
    }
}

/// Encoder settings; the input mode is inferred from dense data when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<InputMode>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input: None,
            hidden: vec![64, 64],
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, data: &[TaskSplits]) -> Result<EncoderSpec, HarnessError> {
        let input = match self.input {
            Some(mode) => mode,
            None => {
                let widths: Vec<Option<usize>> = data.iter().map(|d| d.train.dense_width()).collect();
                match widths.first() {
                    Some(Some(w)) if widths.iter().all(|x| *x == Some(*w)) => InputMode::Vector { dim: *w },
                    _ => {
                        return Err(HarnessError::Config(
                            "model.input is required unless all training data is dense with one width".into(),
                        ))
                    }
                }
            }
        };
        let spec = EncoderSpec {
            input,
            hidden: self.hidden.clone(),
            activation: self.activation,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Simultaneous training of all tasks, or consecutive training (auxiliary
/// task with its penalty first, then the target without).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    #[default]
    Joint,
    Stilt,
}

/// Everything needed to rerun one trial in isolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub data: DataSource,
    pub tasks: TaskSelection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub pipeline: Pipeline,
    #[serde(default)]
    pub freeze_encoder: bool,
    #[serde(default)]
    pub eval: EvalOptions,
}

impl TrialConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.train.validate()?;
        let names = self.tasks.names();
        if self.pipeline == Pipeline::Stilt {
            let Some(aux) = &self.tasks.auxiliary else {
                return Err(HarnessError::Config("stilt needs an auxiliary task".into()));
            };
            if self.objective.variant != Variant::MtlFair || self.objective.fairness.keys().ne([aux]) {
                return Err(HarnessError::Config(
                    "stilt expects variant mtl-fair with the penalty on the auxiliary task".into(),
                ));
            }
        }
        self.objective.validate(&names)?;
        Ok(())
    }
}

/// A trained trial with its dev and test reports per task.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub model: ModelParams,
    pub history: TrainHistory,
    pub dev: BTreeMap<String, EvalReport>,
    pub test: BTreeMap<String, EvalReport>,
}

/// Trains and evaluates one configuration on already loaded data.
pub fn run_trial(config: &TrialConfig, data: &[TaskSplits]) -> Result<TrialOutcome, HarnessError> {
    config.validate()?;
    let names = config.tasks.names();
    let loaded: Vec<&str> = data.iter().map(|d| d.name()).collect();
    if loaded != names {
        return Err(HarnessError::Config(format!(
            "data holds tasks {loaded:?}, config trains {names:?}"
        )));
    }
    let encoder = config.model.encoder(data)?;
    let specs: Vec<_> = data.iter().map(|d| d.train.spec.clone()).collect();
    let mut model = init_model(&encoder, &specs, config.train.seed)?;
    let task_data: Vec<TaskData<'_>> = data
        .iter()
        .map(|d| TaskData {
            train: &d.train,
            dev: Some(&d.dev),
        })
        .collect();
    let (model, history) = match config.pipeline {
        Pipeline::Joint => {
            if config.freeze_encoder {
                model.set_frozen(ENCODER, true)?;
            }
            train(&config.objective, &task_data, model, &config.train)?
        }
        Pipeline::Stilt => {
            let fairness = *config.objective.fairness.values().next().expect("validated");
            let stilt = StiltConfig {
                stage_b: config.train.clone(),
                stage_a: config.train.clone(),
                fairness,
                freeze_encoder: config.freeze_encoder,
            };
            stilt_train(task_data[1], task_data[0], model, &stilt)?
        }
    };
    let mut dev = BTreeMap::new();
    let mut test = BTreeMap::new();
    for d in data {
        dev.insert(d.name().to_string(), evaluate(&model, &d.dev, &config.eval)?);
        if let Some(t) = &d.test {
            test.insert(d.name().to_string(), evaluate(&model, t, &config.eval)?);
        }
    }
    Ok(TrialOutcome {
        model,
        history,
        dev,
        test,
    })
}

/// Settings shared by every trial of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBase {
    pub data: DataSource,
    pub tasks: TaskSelection,
    #[serde(default)]
    pub model: ModelConfig,
    /// Epochs, optimizer and checkpoint settings; grid values replace the
    /// learning rate, batch size, scheduler and seed.
    #[serde(default)]
    pub train: TrainConfig,
    /// Prior and support settings of the penalty; grid values replace λ, ρ
    /// and the burn-in.
    #[serde(default)]
    pub fairness: FairnessConfig,
    #[serde(default)]
    pub eval: EvalOptions,
}

/// Value lists per hyperparameter. Fairness lists only expand the grid for
/// variants with a penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub variant: Variant,
    #[serde(default)]
    pub pipeline: Pipeline,
    #[serde(default)]
    pub freeze_encoder: bool,
    #[serde(default = "default_lr")]
    pub learning_rate: Vec<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: Vec<usize>,
    #[serde(default = "default_lambda")]
    pub lambda: Vec<f64>,
    #[serde(default = "default_rho")]
    pub rho: Vec<f64>,
    /// Burn-in lengths in epochs.
    #[serde(default = "default_burn_in")]
    pub burn_in: Vec<f64>,
    #[serde(default = "default_scheduler")]
    pub scheduler: Vec<Scheduler>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_lr() -> Vec<f64> {
    vec![1e-4, 1e-5, 1e-6]
}
fn default_batch() -> Vec<usize> {
    vec![16, 32, 48]
}
fn default_lambda() -> Vec<f64> {
    vec![0.01, 0.05, 0.1]
}
fn default_rho() -> Vec<f64> {
    vec![0.01, 0.1, 0.9]
}
fn default_burn_in() -> Vec<f64> {
    vec![0.5, 1.0]
}
fn default_scheduler() -> Vec<Scheduler> {
    vec![Scheduler::Uniform]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl GridSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            pipeline: Pipeline::Joint,
            freeze_encoder: false,
            learning_rate: default_lr(),
            batch_size: default_batch(),
            lambda: default_lambda(),
            rho: default_rho(),
            burn_in: default_burn_in(),
            scheduler: default_scheduler(),
            seeds: default_seeds(),
        }
    }

    pub fn has_penalty(&self) -> bool {
        !matches!(self.variant, Variant::StlBase | Variant::MtlBase)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let empty = |name: &str| Err(HarnessError::Config(format!("grid list `{name}` is empty")));
        if self.learning_rate.is_empty() {
            return empty("learning_rate");
        }
        if self.batch_size.is_empty() {
            return empty("batch_size");
        }
        if self.scheduler.is_empty() {
            return empty("scheduler");
        }
        if self.seeds.is_empty() {
            return empty("seeds");
        }
        if self.has_penalty() {
            if self.lambda.is_empty() {
                return empty("lambda");
            }
            if self.rho.is_empty() {
                return empty("rho");
            }
            if self.burn_in.is_empty() {
                return empty("burn_in");
            }
        }
        Ok(())
    }

    /// Number of trials, reported before launch.
    pub fn size(&self) -> usize {
        let fair = if self.has_penalty() {
            self.lambda.len() * self.rho.len() * self.burn_in.len()
        } else {
            1
        };
        self.learning_rate.len() * self.batch_size.len() * self.scheduler.len() * self.seeds.len() * fair
    }

    /// The cartesian product, seeds outermost.
    pub fn points(&self) -> Vec<TrialPoint> {
        let fair: Vec<Option<FairPoint>> = if self.has_penalty() {
            let mut v = Vec::new();
            for &lambda in &self.lambda {
                for &rho in &self.rho {
                    for &burn_in in &self.burn_in {
                        v.push(Some(FairPoint { lambda, rho, burn_in }));
                    }
                }
            }
            v
        } else {
            vec![None]
        };
        let mut out = Vec::with_capacity(self.size());
        for &seed in &self.seeds {
            for &learning_rate in &self.learning_rate {
                for &batch_size in &self.batch_size {
                    for &scheduler in &self.scheduler {
                        for f in &fair {
                            out.push(TrialPoint {
                                variant: self.variant,
                                pipeline: self.pipeline,
                                freeze_encoder: self.freeze_encoder,
                                learning_rate,
                                batch_size,
                                scheduler,
                                seed,
                                fairness: *f,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairPoint {
    pub lambda: f64,
    pub rho: f64,
    /// Epochs.
    pub burn_in: f64,
}

/// One hyperparameter assignment of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialPoint {
    pub variant: Variant,
    pub pipeline: Pipeline,
    pub freeze_encoder: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub scheduler: Scheduler,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fairness: Option<FairPoint>,
}

/// Tasks that carry the penalty: the target for STL-fair, the auxiliary task
/// for MTL-fair and consecutive training, both for MTL-inter.
pub fn penalized_tasks(variant: Variant, tasks: &TaskSelection) -> Vec<String> {
    let aux = tasks.auxiliary.clone();
    match variant {
        Variant::StlBase | Variant::MtlBase => Vec::new(),
        Variant::StlFair => vec![tasks.target.clone()],
        Variant::MtlFair => aux.into_iter().collect(),
        Variant::MtlInter => std::iter::once(tasks.target.clone()).chain(aux).collect(),
    }
}

impl TrialPoint {
    pub fn config(&self, base: &ExperimentBase) -> TrialConfig {
        let train = TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            scheduler: self.scheduler,
            seed: self.seed,
            ..base.train.clone()
        };
        let mut objective = ObjectiveSpec::base(self.variant);
        if let Some(f) = self.fairness {
            let cfg = FairnessConfig {
                lambda: f.lambda,
                rho: f.rho,
                burn_in: burn_in_fraction(f.burn_in, train.epochs),
                ..base.fairness
            };
            for task in penalized_tasks(self.variant, &base.tasks) {
                objective = objective.with_fairness(&task, cfg);
            }
        }
        TrialConfig {
            data: base.data.clone(),
            tasks: base.tasks.clone(),
            model: base.model.clone(),
            train,
            objective,
            pipeline: self.pipeline,
            freeze_encoder: self.freeze_encoder,
            eval: base.eval.clone(),
        }
    }
}

/// Result of one grid trial. Failed trials keep their error text and carry
/// no reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub hash: String,
    pub point: TrialPoint,
    pub status: TrialStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub dev: BTreeMap<String, EvalReport>,
    #[serde(default)]
    pub test: BTreeMap<String, EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub wall_clock_secs: f64,
}

impl TrialRecord {
    pub fn completed(&self) -> bool {
        self.status == TrialStatus::Completed
    }
}

#[cfg(test)]
mod tests;
