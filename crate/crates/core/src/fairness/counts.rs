use serde::{Deserialize, Serialize};

use crate::data::{GroupId, Label, TaskKind, TaskSpec};

/// Counts indexed by (group, true class, predicted class) for one label slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountTable {
    groups: usize,
    classes: usize,
    cells: Vec<f64>,
}

impl CountTable {
    pub fn zeros(groups: usize, classes: usize) -> Self {
        Self {
            groups,
            classes,
            cells: vec![0.0; groups * classes * classes],
        }
    }

    /// Row-major cells, (group, y, ŷ) with ŷ fastest.
    pub fn from_cells(groups: usize, classes: usize, cells: Vec<f64>) -> Option<Self> {
        (cells.len() == groups * classes * classes && cells.iter().all(|c| *c >= 0.0)).then_some(Self {
            groups,
            classes,
            cells,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    fn offset(&self, g: usize, y: usize, yhat: usize) -> usize {
        (g * self.classes + y) * self.classes + yhat
    }

    pub fn get(&self, g: usize, y: usize, yhat: usize) -> f64 {
        self.cells[self.offset(g, y, yhat)]
    }

    pub fn add(&mut self, g: usize, y: usize, yhat: usize, amount: f64) {
        let o = self.offset(g, y, yhat);
        self.cells[o] += amount;
    }

    /// Examples of group `g` with true class `y`.
    pub fn support(&self, g: usize, y: usize) -> f64 {
        (0..self.classes).map(|k| self.get(g, y, k)).sum()
    }

    pub fn group_support(&self, g: usize) -> f64 {
        (0..self.classes).map(|y| self.support(g, y)).sum()
    }

    /// Predicted-class count of group `g`, marginalized over `y`.
    pub fn predicted(&self, g: usize, yhat: usize) -> f64 {
        (0..self.classes).map(|y| self.get(g, y, yhat)).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            groups: self.groups,
            classes: self.classes,
            cells: self.cells.iter().map(|c| c * factor).collect(),
        }
    }
}

/// One count table per label slot of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCellCounts {
    pub kind: TaskKind,
    pub slots: Vec<CountTable>,
}

impl GroupCellCounts {
    pub fn zeros(kind: TaskKind, groups: usize) -> Self {
        Self {
            kind,
            slots: (0..kind.slots())
                .map(|_| CountTable::zeros(groups, kind.classes()))
                .collect(),
        }
    }

    pub fn groups(&self) -> usize {
        self.slots.first().map_or(0, CountTable::groups)
    }
}

/// Tallies (group, y, ŷ) over grouped examples; ungrouped ones are skipped.
pub fn hard_counts(
    predicted: &[Label],
    truth: &[Label],
    groups: &[Option<GroupId>],
    spec: &TaskSpec,
) -> GroupCellCounts {
    assert_eq!(predicted.len(), truth.len(), "predictions and labels must align");
    assert_eq!(predicted.len(), groups.len(), "predictions and groups must align");
    let schema = &spec.schema;
    let mut counts = GroupCellCounts::zeros(spec.kind, schema.group_count());
    for ((p, t), g) in predicted.iter().zip(truth).zip(groups) {
        let Some(g) = g else { continue };
        let gi = schema.group_index(g);
        for (slot, table) in counts.slots.iter_mut().enumerate() {
            let y = spec.kind.class_in_slot(t, slot);
            let yhat = spec.kind.class_in_slot(p, slot);
            table.add(gi, y, yhat, 1.0);
        }
    }
    counts
}

/// ε for one slot of equalized odds: the largest |ln P(ŷ|ζi,y) − ln P(ŷ|ζj,y)|
/// over groups whose (ζ, y) support is positive and at least `min_support`.
pub fn slot_epsilon_deo(table: &CountTable, min_support: f64) -> f64 {
    let mut eps: f64 = 0.0;
    for y in 0..table.classes() {
        let qualifying: Vec<(usize, f64)> = (0..table.groups())
            .map(|g| (g, table.support(g, y)))
            .filter(|&(_, s)| s > 0.0 && s >= min_support)
            .collect();
        if qualifying.len() < 2 {
            continue;
        }
        for yhat in 0..table.classes() {
            let rates = qualifying.iter().map(|&(g, s)| table.get(g, y, yhat) / s);
            eps = eps.max(log_spread(rates));
        }
    }
    eps
}

/// ε for one slot of differential fairness (no conditioning on y).
pub fn slot_epsilon_df(table: &CountTable, min_support: f64) -> f64 {
    let qualifying: Vec<(usize, f64)> = (0..table.groups())
        .map(|g| (g, table.group_support(g)))
        .filter(|&(_, s)| s > 0.0 && s >= min_support)
        .collect();
    if qualifying.len() < 2 {
        return 0.0;
    }
    let mut eps: f64 = 0.0;
    for yhat in 0..table.classes() {
        let rates = qualifying.iter().map(|&(g, s)| table.predicted(g, yhat) / s);
        eps = eps.max(log_spread(rates));
    }
    eps
}

/// max ln r − min ln r; infinite when some but not all rates are zero.
fn log_spread(rates: impl Iterator<Item = f64>) -> f64 {
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    let mut any_zero = false;
    let mut any_positive = false;
    for r in rates {
        if r == 0.0 {
            any_zero = true;
        } else {
            any_positive = true;
            let l = r.ln();
            hi = hi.max(l);
            lo = lo.min(l);
        }
    }
    match (any_zero, any_positive) {
        (true, true) => f64::INFINITY,
        (_, false) => 0.0,
        (false, true) => hi - lo,
    }
}

/// Per-slot equalized-odds ε.
pub fn epsilon_deo_per_slot(counts: &GroupCellCounts, min_support: f64) -> Vec<f64> {
    counts.slots.iter().map(|t| slot_epsilon_deo(t, min_support)).collect()
}

pub fn epsilon_df_per_slot(counts: &GroupCellCounts, min_support: f64) -> Vec<f64> {
    counts.slots.iter().map(|t| slot_epsilon_df(t, min_support)).collect()
}

/// Equalized-odds ε, macro-averaged over label slots. `f64::INFINITY` marks
/// a zero rate facing a nonzero one.
pub fn epsilon_deo(counts: &GroupCellCounts, min_support: f64) -> f64 {
    macro_average(&epsilon_deo_per_slot(counts, min_support))
}

pub fn epsilon_df(counts: &GroupCellCounts, min_support: f64) -> f64 {
    macro_average(&epsilon_df_per_slot(counts, min_support))
}

fn macro_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
