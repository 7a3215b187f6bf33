//! Evaluation: macro-F1, per-group F1, ΔRecall/ΔSpecificity, and hard ε
//! measures, plus sequence-level aggregation of per-chunk probabilities.
//!
//! Fairness numbers come from [`crate::fairness`] applied to the hard
//! (group, y, ŷ) counts of thresholded predictions.

mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Example, GroupId, Label, TaskDataset, TaskKind, TaskSpec};
use crate::diffmath::evaluate as eval_expr;
use crate::fairness::{epsilon_deo, epsilon_df, hard_counts, GroupCellCounts};
use crate::model::{ModelError, ModelParams};

pub(crate) use report::maybe_inf;
pub use report::{EvalReport, GroupReport, TSV_COLUMNS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("aggregation needs at least one probability")]
    EmptySequence,
    #[error("aggregation scale c must be positive, got {0}")]
    BadScale(f64),
    #[error("sequence `{key}` mixes labels or groups across its members")]
    InconsistentSequence { key: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("numeric failure: {0}")]
    Math(#[from] crate::diffmath::MathError),
}

/// Per-class F1 breakdown in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Summary {
    pub macro_f1: f64,
    /// One entry per class (or per slot for multilabel); `None` when the
    /// class has no true examples and is left out of the average.
    pub per_class: Vec<Option<f64>>,
    pub flags: Vec<String>,
}

fn f1_from(tp: f64, fp: f64, fn_: f64) -> f64 {
    let denom = 2.0 * tp + fp + fn_;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * tp / denom
    }
}

/// Macro-F1 with per-class detail. Binary and multiclass tasks average over
/// classes; multilabel tasks average the positive-class F1 of each slot.
pub fn f1_summary(predicted: &[Label], truth: &[Label], kind: TaskKind) -> F1Summary {
    assert_eq!(predicted.len(), truth.len(), "predictions and labels must align");
    // (tp, fp, fn) per reported unit.
    let units = match kind {
        TaskKind::Multilabel(k) => k,
        _ => kind.classes(),
    };
    let mut tally = vec![(0.0, 0.0, 0.0); units];
    for (p, t) in predicted.iter().zip(truth) {
        match kind {
            TaskKind::Multilabel(k) => {
                for (s, cell) in tally.iter_mut().enumerate().take(k) {
                    let (ps, ts) = (kind.class_in_slot(p, s) == 1, kind.class_in_slot(t, s) == 1);
                    match (ps, ts) {
                        (true, true) => cell.0 += 1.0,
                        (true, false) => cell.1 += 1.0,
                        (false, true) => cell.2 += 1.0,
                        (false, false) => {}
                    }
                }
            }
            _ => {
                let (pc, tc) = (kind.class_in_slot(p, 0), kind.class_in_slot(t, 0));
                if pc == tc {
                    tally[tc].0 += 1.0;
                } else {
                    tally[pc].1 += 1.0;
                    tally[tc].2 += 1.0;
                }
            }
        }
    }
    let mut flags = Vec::new();
    let mut per_class = Vec::with_capacity(units);
    for (c, &(tp, fp, fn_)) in tally.iter().enumerate() {
        if tp + fn_ == 0.0 {
            flags.push(format!("class {c}: no true examples, excluded"));
            per_class.push(None);
            continue;
        }
        if tp + fp == 0.0 {
            flags.push(format!("class {c}: never predicted, F1 set to 0"));
        }
        per_class.push(Some(100.0 * f1_from(tp, fp, fn_)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_f1 = if present.is_empty() {
        flags.push("no class has true examples".into());
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    F1Summary {
        macro_f1,
        per_class,
        flags,
    }
}

/// Macro-averaged F1 in percent.
pub fn macro_f1(predicted: &[Label], truth: &[Label], kind: TaskKind) -> f64 {
    f1_summary(predicted, truth, kind).macro_f1
}

/// Gaps in recall and specificity across groups, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaMetrics {
    pub recall: f64,
    pub specificity: f64,
    /// True when some slot had fewer than two groups to compare.
    pub degenerate: bool,
}

fn spread(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    Some(hi - lo)
}

/// Max-minus-min recall and specificity over groups with positive support,
/// macro-averaged over slots. `None` for multiclass tasks.
pub fn delta_metrics(counts: &GroupCellCounts, min_support: f64) -> Option<DeltaMetrics> {
    if matches!(counts.kind, TaskKind::Multiclass(_)) {
        return None;
    }
    let mut recall = 0.0;
    let mut specificity = 0.0;
    let mut degenerate = false;
    for table in &counts.slots {
        let rates = |y: usize| -> Vec<f64> {
            (0..table.groups())
                .filter_map(|g| {
                    let s = table.support(g, y);
                    (s > 0.0 && s >= min_support).then(|| table.get(g, y, y) / s)
                })
                .collect()
        };
        let r = spread(&rates(1));
        let s = spread(&rates(0));
        degenerate |= r.is_none() || s.is_none();
        recall += r.unwrap_or(0.0);
        specificity += s.unwrap_or(0.0);
    }
    let n = counts.slots.len().max(1) as f64;
    Some(DeltaMetrics {
        recall: 100.0 * recall / n,
        specificity: 100.0 * specificity / n,
        degenerate,
    })
}

/// Pr(y = 1 | Ŷ) = (max Ŷ + mean Ŷ · n / c) / (1 + n / c).
pub fn aggregate_sequence_predictions(probabilities: &[f64], c: f64) -> Result<f64, EvalError> {
    if probabilities.is_empty() {
        return Err(EvalError::EmptySequence);
    }
    if !(c > 0.0) {
        return Err(EvalError::BadScale(c));
    }
    let n = probabilities.len() as f64;
    let max = probabilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = probabilities.iter().sum::<f64>() / n;
    // Same quantity as (max + mean·r)/(1 + r), arranged so one element, or
    // equal elements, reproduce the input exactly.
    Ok(mean + (max - mean) / (1.0 + n / c))
}

/// Thresholds probabilities into a label: argmax (ties to the lowest index)
/// for multiclass, 0.5 per slot otherwise.
pub fn decide(kind: TaskKind, probabilities: &[f64]) -> Label {
    match kind {
        TaskKind::Multiclass(_) => {
            let mut best = 0;
            for (i, &p) in probabilities.iter().enumerate() {
                if p > probabilities[best] {
                    best = i;
                }
            }
            Label::Class(best)
        }
        TaskKind::Binary => Label::Class(usize::from(probabilities[0] >= 0.5)),
        TaskKind::Multilabel(_) => Label::Multi(probabilities.iter().map(|&p| p >= 0.5).collect()),
    }
}

/// Output rows of `task`'s head for `examples`, computed in chunks.
pub fn predict_probabilities(
    params: &ModelParams,
    task: &str,
    examples: &[&Example],
) -> Result<Vec<Vec<f64>>, EvalError> {
    const CHUNK: usize = 1024;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(CHUNK) {
        let features: Vec<_> = chunk.iter().map(|e| &e.features).collect();
        let probs = eval_expr(&params.predict(task, &features)?, params)?;
        let width = probs.shape()[1];
        out.extend(probs.data().chunks(width).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Merges per-chunk predictions into one prediction per sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregation {
    /// Sequence key is the example id up to the last occurrence of this
    /// separator (the whole id when absent).
    pub separator: char,
    #[serde(default = "default_scale")]
    pub c: f64,
}

fn default_scale() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub aggregation: Option<Aggregation>,
    pub min_support: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            aggregation: None,
            min_support: 1.0,
        }
    }
}

struct Scored {
    label: Label,
    groups: Option<GroupId>,
    probabilities: Vec<f64>,
}

fn aggregate(examples: &[&Example], probabilities: Vec<Vec<f64>>, agg: &Aggregation) -> Result<Vec<Scored>, EvalError> {
    let mut order: Vec<String> = Vec::new();
    let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        let key =
            e.id.rsplit_once(agg.separator)
                .map_or(e.id.as_str(), |(k, _)| k)
                .to_string();
        let entry = members.entry(key.clone()).or_default();
        if entry.is_empty() {
            order.push(key);
        }
        entry.push(i);
    }
    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let idx = &members[&key];
        let first = examples[idx[0]];
        if idx
            .iter()
            .any(|&i| examples[i].label != first.label || examples[i].groups != first.groups)
        {
            return Err(EvalError::InconsistentSequence { key });
        }
        let width = probabilities[idx[0]].len();
        let merged = (0..width)
            .map(|col| {
                let column: Vec<f64> = idx.iter().map(|&i| probabilities[i][col]).collect();
                aggregate_sequence_predictions(&column, agg.c)
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(Scored {
            label: first.label.clone(),
            groups: first.groups.clone(),
            probabilities: merged,
        });
    }
    Ok(out)
}

/// Builds a report from precomputed head outputs, one row per example.
pub fn report_from_probabilities(
    spec: &TaskSpec,
    examples: &[&Example],
    probabilities: Vec<Vec<f64>>,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    assert_eq!(examples.len(), probabilities.len(), "one output row per example");
    let scored = match &options.aggregation {
        Some(agg) => aggregate(examples, probabilities, agg)?,
        None => examples
            .iter()
            .zip(probabilities)
            .map(|(e, p)| Scored {
                label: e.label.clone(),
                groups: e.groups.clone(),
                probabilities: p,
            })
            .collect(),
    };
    let predicted: Vec<Label> = scored.iter().map(|s| decide(spec.kind, &s.probabilities)).collect();
    let truth: Vec<Label> = scored.iter().map(|s| s.label.clone()).collect();
    let groups: Vec<Option<GroupId>> = scored.iter().map(|s| s.groups.clone()).collect();
    Ok(report::build(spec, &predicted, &truth, &groups, options.min_support))
}

/// Evaluates `params` on `dataset` with the task's head.
pub fn evaluate(params: &ModelParams, dataset: &TaskDataset, options: &EvalOptions) -> Result<EvalReport, EvalError> {
    let examples: Vec<&Example> = dataset.examples.iter().collect();
    let probs = predict_probabilities(params, &dataset.spec.name, &examples)?;
    report_from_probabilities(&dataset.spec, &examples, probs, options)
}

/// Hard ε-DEO and ε-DF on decided labels.
pub fn hard_fairness(
    spec: &TaskSpec,
    predicted: &[Label],
    truth: &[Label],
    groups: &[Option<GroupId>],
    min_support: f64,
) -> (f64, f64) {
    let counts = hard_counts(predicted, truth, groups, spec);
    (epsilon_deo(&counts, min_support), epsilon_df(&counts, min_support))
}
