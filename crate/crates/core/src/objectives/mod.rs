//! Training objectives: per-task likelihood losses plus hinge fairness
//! penalties on designated tasks, gated by a burn-in period.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Example, Label, TaskKind, TaskSpec};
use crate::diffmath::{Array, Expr};
use crate::fairness::{
    epsilon_deo_soft, fairness_penalty, soft_expected_counts, FairnessConfig, FairnessError, SmoothedCounts,
    SmoothedExpr,
};
use crate::model::{ModelError, ModelParams};

/// Probabilities are clamped to `[PROB_FLOOR, 1 − PROB_FLOOR]` inside logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid objective: {0}")]
    Spec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error("task `{0}` has no batch")]
    MissingBatch(String),
    #[error("empty batch for task `{0}`")]
    EmptyBatch(String),
    #[error("no smoothed counts for penalized task `{0}`")]
    MissingState(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    StlBase,
    StlFair,
    MtlBase,
    MtlFair,
    MtlInter,
}

impl Variant {
    pub fn is_multitask(self) -> bool {
        matches!(self, Variant::MtlBase | Variant::MtlFair | Variant::MtlInter)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::StlBase => "stl-base",
            Variant::StlFair => "stl-fair",
            Variant::MtlBase => "mtl-base",
            Variant::MtlFair => "mtl-fair",
            Variant::MtlInter => "mtl-inter",
        }
    }
}

/// Which tasks carry a fairness penalty, and how much each task loss weighs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub variant: Variant,
    /// Penalty configuration per penalized task.
    #[serde(default)]
    pub fairness: BTreeMap<String, FairnessConfig>,
    /// Loss weight per task; tasks not listed weigh 1.
    #[serde(default)]
    pub loss_weights: BTreeMap<String, f64>,
}

impl ObjectiveSpec {
    pub fn base(variant: Variant) -> Self {
        Self {
            variant,
            fairness: BTreeMap::new(),
            loss_weights: BTreeMap::new(),
        }
    }

    pub fn with_fairness(mut self, task: &str, config: FairnessConfig) -> Self {
        self.fairness.insert(task.to_string(), config);
        self
    }

    pub fn weight(&self, task: &str) -> f64 {
        self.loss_weights.get(task).copied().unwrap_or(1.0)
    }

    /// Checks the variant's shape against the trained task names.
    pub fn validate(&self, tasks: &[&str]) -> Result<(), ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::Spec(m));
        let expected_tasks = if self.variant.is_multitask() { 2 } else { 1 };
        if tasks.len() != expected_tasks {
            return bad(format!(
                "{} trains {expected_tasks} task(s), got {}",
                self.variant.as_str(),
                tasks.len()
            ));
        }
        if tasks.len() == 2 && tasks[0] == tasks[1] {
            return bad("the two tasks must differ".into());
        }
        for name in self.fairness.keys().chain(self.loss_weights.keys()) {
            if !tasks.contains(&name.as_str()) {
                return bad(format!("`{name}` is not one of the trained tasks"));
            }
        }
        for (name, w) in &self.loss_weights {
            if !(w.is_finite() && *w >= 0.0) {
                return bad(format!("loss weight of `{name}` must be finite and >= 0"));
            }
        }
        for cfg in self.fairness.values() {
            cfg.validate()?;
        }
        let n = self.fairness.len();
        let ok = match self.variant {
            Variant::StlBase | Variant::MtlBase => n == 0,
            Variant::StlFair | Variant::MtlFair => n == 1,
            Variant::MtlInter => n == 2,
        };
        if !ok {
            let want = match self.variant {
                Variant::StlBase | Variant::MtlBase => "no fairness target",
                Variant::StlFair | Variant::MtlFair => "exactly one fairness target",
                Variant::MtlInter => "a fairness target on both tasks",
            };
            return bad(format!("{} needs {want}, got {n}", self.variant.as_str()));
        }
        Ok(())
    }
}

/// 0 while `step < burn_in · total_steps`, 1 afterwards.
pub fn burn_in_gate(step: u64, total_steps: u64, burn_in: f64) -> f64 {
    assert!(total_steps > 0, "total_steps must be positive");
    if (step as f64) < burn_in * total_steps as f64 {
        0.0
    } else {
        1.0
    }
}

/// Converts a burn-in measured in epochs to a fraction of the run.
pub fn burn_in_fraction(burn_in_epochs: f64, epochs: usize) -> f64 {
    if epochs == 0 {
        return 1.0;
    }
    (burn_in_epochs / epochs as f64).clamp(0.0, 1.0)
}

/// Position within a run, for the burn-in gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub step: u64,
    pub total_steps: u64,
}

impl Progress {
    /// A position past any burn-in.
    pub fn finished() -> Self {
        Self {
            step: 1,
            total_steps: 1,
        }
    }
}

/// Mean negative log-likelihood of `labels` under `probabilities`.
///
/// Multiclass heads use cross-entropy over rows; binary and multilabel heads
/// average the per-slot binary cross-entropy over examples and slots.
pub fn task_loss(probabilities: &Expr, labels: &[Label], kind: TaskKind) -> Expr {
    let n = labels.len();
    let width = kind.output_width();
    let mut target = vec![0.0; n * width];
    for (i, label) in labels.iter().enumerate() {
        match (kind, label) {
            (TaskKind::Multiclass(_), Label::Class(c)) => target[i * width + c] = 1.0,
            (TaskKind::Binary, Label::Class(c)) => target[i] = *c as f64,
            (TaskKind::Multilabel(_), Label::Multi(bits)) => {
                for (s, b) in bits.iter().enumerate() {
                    target[i * width + s] = f64::from(u8::from(*b));
                }
            }
            _ => panic!("label {label:?} does not match task kind {kind:?}"),
        }
    }
    let y = Expr::constant(Array::matrix(n, width, target.clone()).expect("shape"));
    let p = probabilities.clamp_min(PROB_FLOOR).clamp_max(1.0 - PROB_FLOOR);
    match kind {
        TaskKind::Multiclass(_) => y.mul(&p.ln()).sum().scale(-1.0 / n as f64),
        TaskKind::Binary | TaskKind::Multilabel(_) => {
            let not_y =
                Expr::constant(Array::matrix(n, width, target.iter().map(|t| 1.0 - t).collect()).expect("shape"));
            let one_minus_p = Expr::scalar(1.0).sub(&p);
            y.mul(&p.ln())
                .add(&not_y.mul(&one_minus_p.ln()))
                .sum()
                .scale(-1.0 / (n * width) as f64)
        }
    }
}

/// Examples of one task drawn for a single optimizer step.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub task: &'a TaskSpec,
    pub examples: Vec<&'a Example>,
}

/// Fairness pieces for one penalized task in one step.
#[derive(Debug, Clone)]
pub struct PenaltyTerm {
    pub task: String,
    /// Soft ε on the blended smoothed counts; `None` when the batch had no
    /// grouped examples and the step was skipped.
    pub epsilon: Option<Expr>,
    /// Gated hinge penalty added to the total (a zero constant when inactive).
    pub penalty: Expr,
    /// Blended Ñ_t to commit once evaluated.
    pub smoothed: Option<SmoothedExpr>,
    /// Burn-in gate value for this step.
    pub gate: f64,
}

impl PenaltyTerm {
    pub fn skipped(&self) -> bool {
        self.epsilon.is_none()
    }
}

/// A built objective with its named parts.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Expr,
    /// Unweighted mean loss per task, in batch order.
    pub task_losses: Vec<(String, Expr)>,
    /// Probability outputs per task, in batch order.
    pub probabilities: Vec<(String, Expr)>,
    pub penalties: Vec<PenaltyTerm>,
}

/// Builds Σ_t w_t ℒ_t + Σ_{penalized t} gate · λ_t max(0, ε_t − ε_target)
/// over the supplied batches.
///
/// Tasks penalized by `spec` but absent from `batches` (possible under a
/// sampling scheduler) contribute nothing. `smoothed` must hold the current
/// counts of every penalized task present.
pub fn build_objective(
    batches: &[Batch<'_>],
    params: &ModelParams,
    spec: &ObjectiveSpec,
    smoothed: &BTreeMap<String, SmoothedCounts>,
    progress: Progress,
) -> Result<Objective, ObjectiveError> {
    let mut task_losses = Vec::new();
    let mut probabilities = Vec::new();
    let mut penalties = Vec::new();
    let mut total: Option<Expr> = None;
    let mut accumulate = |term: Expr| {
        total = Some(match total.take() {
            None => term,
            Some(t) => t.add(&term),
        });
    };
    for batch in batches {
        let name = batch.task.name.as_str();
        if batch.examples.is_empty() {
            return Err(ObjectiveError::EmptyBatch(name.to_string()));
        }
        let features: Vec<_> = batch.examples.iter().map(|e| &e.features).collect();
        let labels: Vec<Label> = batch.examples.iter().map(|e| e.label.clone()).collect();
        let probs = params.predict(name, &features)?;
        let loss = task_loss(&probs, &labels, batch.task.kind);
        accumulate(loss.scale(spec.weight(name)));
        task_losses.push((name.to_string(), loss));

        if let Some(cfg) = spec.fairness.get(name) {
            let state = smoothed
                .get(name)
                .ok_or_else(|| ObjectiveError::MissingState(name.to_string()))?;
            let gate = burn_in_gate(progress.step, progress.total_steps, cfg.burn_in);
            let groups: Vec<_> = batch.examples.iter().map(|e| e.groups.clone()).collect();
            let soft = soft_expected_counts(&probs, &labels, &groups, batch.task);
            let term = if soft.grouped_examples == 0 {
                PenaltyTerm {
                    task: name.to_string(),
                    epsilon: None,
                    penalty: Expr::scalar(0.0),
                    smoothed: None,
                    gate,
                }
            } else {
                let blended = state.blend(&soft)?;
                let eps = epsilon_deo_soft(&blended, cfg.alpha, cfg.min_support);
                let penalty = if gate > 0.0 {
                    let p = fairness_penalty(&eps, cfg);
                    accumulate(p.clone());
                    p
                } else {
                    Expr::scalar(0.0)
                };
                PenaltyTerm {
                    task: name.to_string(),
                    epsilon: Some(eps),
                    penalty,
                    smoothed: Some(blended),
                    gate,
                }
            };
            penalties.push(term);
        }
        probabilities.push((name.to_string(), probs));
    }
    let total = total.ok_or_else(|| ObjectiveError::Spec("no batches supplied".into()))?;
    Ok(Objective {
        total,
        task_losses,
        probabilities,
        penalties,
    })
}

/// Single-task objective: task loss plus an optional gated penalty.
pub fn stl_objective(
    batch: &Batch<'_>,
    params: &ModelParams,
    fairness: Option<(&FairnessConfig, &SmoothedCounts)>,
    progress: Progress,
) -> Result<Objective, ObjectiveError> {
    let name = batch.task.name.clone();
    let mut spec = ObjectiveSpec::base(Variant::StlBase);
    let mut states = BTreeMap::new();
    if let Some((cfg, state)) = fairness {
        spec = ObjectiveSpec::base(Variant::StlFair).with_fairness(&name, *cfg);
        states.insert(name, state.clone());
    }
    build_objective(std::slice::from_ref(batch), params, &spec, &states, progress)
}

/// Which tasks of a two-task objective carry a penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FairnessOn {
    None,
    TaskB,
    Both,
}

/// Two-task objective: sum of the per-task mean losses plus gated penalties
/// on the tasks selected by `fairness_on`. `configs` and `states` are
/// indexed (task A, task B).
pub fn mtl_objective(
    batch_a: &Batch<'_>,
    batch_b: &Batch<'_>,
    params: &ModelParams,
    fairness_on: FairnessOn,
    configs: [&FairnessConfig; 2],
    states: [&SmoothedCounts; 2],
    progress: Progress,
) -> Result<Objective, ObjectiveError> {
    let a = batch_a.task.name.as_str();
    let b = batch_b.task.name.as_str();
    let mut spec = ObjectiveSpec::base(match fairness_on {
        FairnessOn::None => Variant::MtlBase,
        FairnessOn::TaskB => Variant::MtlFair,
        FairnessOn::Both => Variant::MtlInter,
    });
    let mut map = BTreeMap::new();
    if fairness_on == FairnessOn::Both {
        spec = spec.with_fairness(a, *configs[0]);
        map.insert(a.to_string(), states[0].clone());
    }
    if fairness_on != FairnessOn::None {
        spec = spec.with_fairness(b, *configs[1]);
        map.insert(b.to_string(), states[1].clone());
    }
    build_objective(&[batch_a.clone(), batch_b.clone()], params, &spec, &map, progress)
}
