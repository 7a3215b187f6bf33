use serde::{Deserialize, Serialize};

use crate::data::{GroupId, Label, TaskKind, TaskSpec};
use crate::diffmath::{Array, Expr};

use super::{CountTable, FairnessError, GroupCellCounts};

/// Expected (group, y, ŷ) counts of a batch as expressions over model outputs.
///
/// Each slot's expression has shape `(groups * classes, classes)`; row
/// `g * classes + y` holds Σ p(ŷ | x) over in-batch examples of group `g` with
/// true class `y`. Row supports do not depend on the model and are kept as
/// plain numbers.
#[derive(Debug, Clone)]
pub struct SoftCounts {
    pub kind: TaskKind,
    pub groups: usize,
    pub slots: Vec<Expr>,
    pub supports: Vec<Vec<f64>>,
    pub grouped_examples: usize,
}

/// Builds expected counts from `probabilities`, the head output of shape
/// `(batch, output_width)` (softmax rows or per-slot sigmoids).
pub fn soft_expected_counts(
    probabilities: &Expr,
    truth: &[Label],
    groups: &[Option<GroupId>],
    spec: &TaskSpec,
) -> SoftCounts {
    assert_eq!(truth.len(), groups.len(), "labels and groups must align");
    let kind = spec.kind;
    let classes = kind.classes();
    let group_count = spec.schema.group_count();
    let rows = group_count * classes;
    let batch = truth.len();
    let group_idx: Vec<Option<usize>> = groups
        .iter()
        .map(|g| g.as_ref().map(|g| spec.schema.group_index(g)))
        .collect();
    let grouped_examples = group_idx.iter().filter(|g| g.is_some()).count();

    let mut slots = Vec::with_capacity(kind.slots());
    let mut supports = Vec::with_capacity(kind.slots());
    for slot in 0..kind.slots() {
        let mut membership = vec![0.0; rows * batch];
        let mut support = vec![0.0; rows];
        for (i, (t, g)) in truth.iter().zip(&group_idx).enumerate() {
            if let Some(g) = g {
                let row = g * classes + kind.class_in_slot(t, slot);
                membership[row * batch + i] = 1.0;
                support[row] += 1.0;
            }
        }
        let slot_probs = match kind {
            TaskKind::Multiclass(_) => probabilities.clone(),
            TaskKind::Binary | TaskKind::Multilabel(_) => {
                let p = if kind.output_width() == 1 {
                    probabilities.clone()
                } else {
                    let mut pick = vec![0.0; kind.output_width()];
                    pick[slot] = 1.0;
                    let pick = Array::matrix(kind.output_width(), 1, pick).expect("shape");
                    probabilities.matmul(&Expr::constant(pick))
                };
                let one_minus = Expr::scalar(1.0).sub(&p);
                Expr::concat(&[one_minus, p], 1)
            }
        };
        let m = Array::matrix(rows, batch, membership).expect("shape");
        slots.push(Expr::constant(m).matmul(&slot_probs));
        supports.push(support);
    }
    SoftCounts {
        kind,
        groups: group_count,
        slots,
        supports,
        grouped_examples,
    }
}

/// Exponentially smoothed counts Ñ_t = (1 − ρ) Ñ_{t−1} + ρ N_t, starting at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedCounts {
    pub rho: f64,
    pub step: u64,
    pub counts: GroupCellCounts,
}

impl SmoothedCounts {
    pub fn new(kind: TaskKind, groups: usize, rho: f64) -> Self {
        assert!(rho > 0.0 && rho <= 1.0, "rho must lie in (0, 1]");
        Self {
            rho,
            step: 0,
            counts: GroupCellCounts::zeros(kind, groups),
        }
    }

    fn check_shape(&self, kind: TaskKind, groups: usize) -> Result<(), FairnessError> {
        if kind != self.counts.kind || groups != self.counts.groups() {
            return Err(FairnessError::ShapeMismatch {
                expected: (self.counts.kind, self.counts.groups()),
                found: (kind, groups),
            });
        }
        Ok(())
    }

    /// Differentiable Ñ_t: the history term is a constant, gradient flows
    /// only through ρ·N_t.
    pub fn blend(&self, batch: &SoftCounts) -> Result<SmoothedExpr, FairnessError> {
        self.check_shape(batch.kind, batch.groups)?;
        let classes = batch.kind.classes();
        let rows = batch.groups * classes;
        let mut slots = Vec::with_capacity(batch.slots.len());
        let mut supports = Vec::with_capacity(batch.slots.len());
        for ((n_t, batch_support), history) in batch.slots.iter().zip(&batch.supports).zip(&self.counts.slots) {
            let prev = Array::matrix(
                rows,
                classes,
                history.cells().iter().map(|c| (1.0 - self.rho) * c).collect(),
            )
            .expect("shape");
            slots.push(Expr::constant(prev).add(&n_t.scale(self.rho)));
            supports.push(
                batch_support
                    .iter()
                    .enumerate()
                    .map(|(r, s)| (1.0 - self.rho) * history.support(r / classes, r % classes) + self.rho * s)
                    .collect(),
            );
        }
        Ok(SmoothedExpr {
            kind: batch.kind,
            groups: batch.groups,
            slots,
            supports,
        })
    }

    /// Stores the evaluated Ñ_t of a blended expression and advances t.
    pub fn commit(&mut self, values: &[&Array]) -> Result<(), FairnessError> {
        let classes = self.counts.kind.classes();
        let groups = self.counts.groups();
        if values.len() != self.counts.slots.len() {
            return Err(FairnessError::SlotCount {
                expected: self.counts.slots.len(),
                found: values.len(),
            });
        }
        let mut next = Vec::with_capacity(values.len());
        for v in values {
            let table = CountTable::from_cells(groups, classes, v.data().to_vec()).ok_or(FairnessError::BadValues)?;
            next.push(table);
        }
        self.counts.slots = next;
        self.step += 1;
        Ok(())
    }
}

/// One smoothing step on plain counts.
pub fn update_smoothed(smoothed: &SmoothedCounts, batch: &GroupCellCounts) -> Result<SmoothedCounts, FairnessError> {
    smoothed.check_shape(batch.kind, batch.groups())?;
    let rho = smoothed.rho;
    let slots = smoothed
        .counts
        .slots
        .iter()
        .zip(&batch.slots)
        .map(|(prev, now)| {
            let cells = prev
                .cells()
                .iter()
                .zip(now.cells())
                .map(|(p, n)| (1.0 - rho) * p + rho * n)
                .collect();
            CountTable::from_cells(prev.groups(), prev.classes(), cells).expect("same shape")
        })
        .collect();
    Ok(SmoothedCounts {
        rho,
        step: smoothed.step + 1,
        counts: GroupCellCounts {
            kind: batch.kind,
            slots,
        },
    })
}

/// Smoothed counts as expressions, ready for the soft ε.
#[derive(Debug, Clone)]
pub struct SmoothedExpr {
    pub kind: TaskKind,
    pub groups: usize,
    pub slots: Vec<Expr>,
    pub supports: Vec<Vec<f64>>,
}

impl SmoothedExpr {
    /// Wraps fixed counts as constant expressions.
    pub fn constant(counts: &GroupCellCounts) -> Self {
        let classes = counts.kind.classes();
        let groups = counts.groups();
        Self {
            kind: counts.kind,
            groups,
            slots: counts
                .slots
                .iter()
                .map(|t| Expr::constant(Array::matrix(groups * classes, classes, t.cells().to_vec()).expect("shape")))
                .collect(),
            supports: counts
                .slots
                .iter()
                .map(|t| {
                    (0..groups * classes)
                        .map(|r| t.support(r / classes, r % classes))
                        .collect()
                })
                .collect(),
        }
    }
}

/// Differentiable equalized-odds ε from smoothed counts.
///
/// P(ŷ|ζ,y) = (Ñ[ζ,y,ŷ] + α) / (Σ_ŷ' Ñ[ζ,y,ŷ'] + αK); ε is the largest
/// absolute log difference over pairs of groups whose smoothed (ζ, y) support
/// is positive and at least `min_support`. Multilabel slots are averaged.
pub fn epsilon_deo_soft(smoothed: &SmoothedExpr, alpha: f64, min_support: f64) -> Expr {
    assert!(alpha > 0.0, "alpha must be positive");
    let classes = smoothed.kind.classes();
    let rows = smoothed.groups * classes;
    let per_slot: Vec<Expr> = smoothed
        .slots
        .iter()
        .zip(&smoothed.supports)
        .map(|(counts, support)| {
            let mut diff_rows: Vec<Vec<f64>> = Vec::new();
            for y in 0..classes {
                let qualifying: Vec<usize> = (0..smoothed.groups)
                    .filter(|&g| {
                        let s = support[g * classes + y];
                        s > 0.0 && s >= min_support
                    })
                    .collect();
                for (a, &gi) in qualifying.iter().enumerate() {
                    for &gj in &qualifying[a + 1..] {
                        let mut row = vec![0.0; rows];
                        row[gi * classes + y] = 1.0;
                        row[gj * classes + y] = -1.0;
                        diff_rows.push(row);
                    }
                }
            }
            if diff_rows.is_empty() {
                return Expr::scalar(0.0);
            }
            let row_total = counts
                .sum_axis(1)
                .reshape(vec![rows, 1])
                .matmul(&Expr::constant(Array::filled(&[1, classes], 1.0)));
            let log_p = counts
                .add(&Expr::scalar(alpha))
                .ln()
                .sub(&row_total.add(&Expr::scalar(alpha * classes as f64)).ln());
            let n_pairs = diff_rows.len();
            let d = Array::matrix(n_pairs, rows, diff_rows.concat()).expect("shape");
            Expr::constant(d).matmul(&log_p).abs().max()
        })
        .collect();
    if per_slot.len() == 1 {
        per_slot.into_iter().next().unwrap()
    } else {
        let parts: Vec<Expr> = per_slot.iter().map(|e| e.reshape(vec![1])).collect();
        Expr::concat(&parts, 0).mean()
    }
}
