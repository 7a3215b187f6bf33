//! Optimizer, task scheduling, and the STL, MTL, and consecutive (STILT)
//! training pipelines.
//!
//! A trainer is single-threaded and owns its parameters, optimizer moments,
//! and smoothed fairness counts. Every random choice derives from the config
//! seed, so a run is a pure function of (seed, config, data).

mod adam;
mod run;
mod schedule;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BatchMode, TaskDataset};
use crate::diffmath::MathError;
use crate::eval::EvalError;
use crate::fairness::{FairnessConfig, FairnessError};
use crate::model::{ModelError, ModelParams, ENCODER};
use crate::objectives::{ObjectiveError, ObjectiveSpec, Variant};

pub use adam::{adam_step, clip_gradients, global_norm, AdamConfig, AdamState};
pub use run::{load_checkpoint, resume, train, TrainerCheckpoint};
pub use schedule::dynamic_schedule;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient for `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("numeric failure at step {step}: {source}")]
    Math { step: u64, source: MathError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    /// Every step draws one batch from each task.
    #[default]
    Uniform,
    /// Every step samples one task, favouring tasks with lower dev F1.
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub scheduler: Scheduler,
    /// Floor γ_min of the dynamic scheduler's task weights.
    pub gamma_min: f64,
    /// Evaluate on dev every this many steps; 0 means once per epoch.
    pub eval_every: u64,
    /// Global gradient-norm cap applied before each update; `None` disables it.
    pub grad_clip: Option<f64>,
    pub batch_mode: BatchMode,
    /// Write a checkpoint every this many steps; 0 disables checkpoints.
    pub checkpoint_every: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            adam: AdamConfig::default(),
            scheduler: Scheduler::Uniform,
            gamma_min: 0.05,
            eval_every: 0,
            grad_clip: Some(5.0),
            batch_mode: BatchMode::Shuffle,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.gamma_min > 0.0 && self.gamma_min <= 0.5) {
            return bad("gamma_min must lie in (0, 0.5]");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be > 0");
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return bad("adam betas must lie in [0, 1) and epsilon must be > 0");
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return bad("checkpoint_every needs checkpoint_dir");
        }
        Ok(())
    }
}

/// Training and dev data of one task.
#[derive(Debug, Clone, Copy)]
pub struct TaskData<'a> {
    pub train: &'a TaskDataset,
    pub dev: Option<&'a TaskDataset>,
}

/// Loss components of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub phase: String,
    /// Tasks whose batches entered this step.
    pub tasks: Vec<String>,
    pub losses: BTreeMap<String, f64>,
    /// Gated penalty value per penalized task.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub penalties: BTreeMap<String, f64>,
    /// Soft ε per penalized task on the smoothed counts.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub soft_epsilon: BTreeMap<String, f64>,
    /// Penalized tasks whose batch had no grouped examples.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_penalty: Vec<String>,
    pub grad_norm: f64,
}

/// Dev metrics of one task at an evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    pub macro_f1: f64,
    #[serde(with = "crate::eval::maybe_inf")]
    pub epsilon_deo: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of steps completed when evaluated.
    pub step: u64,
    pub epoch: usize,
    pub phase: String,
    pub dev: BTreeMap<String, DevMetrics>,
    /// Task sampling probabilities in effect after this evaluation.
    pub schedule: BTreeMap<String, f64>,
}

/// A contiguous run of steps with one objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub name: String,
    pub variant: Variant,
    pub start_step: u64,
    pub end_step: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub phases: Vec<PhaseRecord>,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub skipped_penalty_steps: u64,
}

impl TrainHistory {
    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    pub fn append(&mut self, other: TrainHistory) {
        self.phases.extend(other.phases);
        self.steps.extend(other.steps);
        self.evals.extend(other.evals);
        self.skipped_penalty_steps += other.skipped_penalty_steps;
    }
}

/// Settings of the consecutive pipeline: fair training on task B, then plain
/// training on task A.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StiltConfig {
    pub stage_b: TrainConfig,
    pub stage_a: TrainConfig,
    pub fairness: FairnessConfig,
    /// Keep the encoder fixed during the second stage.
    #[serde(default)]
    pub freeze_encoder: bool,
}

/// Trains θ_s ∪ θ_b on task B with the fairness penalty, then θ_s ∪ θ_a on
/// task A without it (θ_a only when `freeze_encoder` is set). The encoder's
/// frozen flag is restored afterwards.
pub fn stilt_train(
    task_b: TaskData<'_>,
    task_a: TaskData<'_>,
    model: ModelParams,
    config: &StiltConfig,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    let b = task_b.train.spec.name.clone();
    let a = task_a.train.spec.name.clone();
    let stage_b = ObjectiveSpec::base(Variant::StlFair).with_fairness(&b, config.fairness);
    let (mut model, mut history) = run::train_phase(&stage_b, &[task_b], model, &config.stage_b, &b, 0)?;
    let was_frozen = model.frozen_components().any(|c| c == ENCODER);
    if config.freeze_encoder {
        model.set_frozen(ENCODER, true)?;
    }
    let offset = history.phases.last().map_or(0, |p| p.end_step);
    let stage_a = ObjectiveSpec::base(Variant::StlBase);
    let (mut model, second) = run::train_phase(&stage_a, &[task_a], model, &config.stage_a, &a, offset)?;
    history.append(second);
    model.set_frozen(ENCODER, was_frozen)?;
    Ok((model, history))
}

#[cfg(test)]
mod tests;
