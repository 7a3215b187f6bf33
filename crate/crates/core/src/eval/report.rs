use serde::{Deserialize, Serialize};

use crate::data::{GroupId, Label, TaskKind, TaskSpec};
use crate::fairness::{epsilon_deo, epsilon_df, hard_counts};

use super::{delta_metrics, f1_summary};

/// Macro-F1 within one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub support: usize,
    pub macro_f1: f64,
}

/// Metrics of one task on one dataset. F1 and Δ values are percentages.
/// Fairness fields are `None` when the data carries no group annotations;
/// an infinite ε serializes as the string `"inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub kind: TaskKind,
    pub examples: usize,
    pub grouped_examples: usize,
    pub macro_f1: f64,
    pub per_class_f1: Vec<Option<f64>>,
    pub per_group: Vec<GroupReport>,
    #[serde(with = "maybe_inf")]
    pub epsilon_deo: Option<f64>,
    #[serde(with = "maybe_inf")]
    pub epsilon_df: Option<f64>,
    pub delta_recall: Option<f64>,
    pub delta_specificity: Option<f64>,
    pub flags: Vec<String>,
}

/// Column order of [`EvalReport::tsv_row`].
pub const TSV_COLUMNS: [&str; 10] = [
    "task",
    "examples",
    "grouped_examples",
    "macro_f1",
    "epsilon_deo",
    "epsilon_df",
    "delta_recall",
    "delta_specificity",
    "group_f1",
    "flags",
];

pub(crate) fn format_metric(value: Option<f64>) -> String {
    match value {
        None => "NA".to_string(),
        Some(v) if v.is_infinite() => "inf".to_string(),
        Some(v) => format!("{v:.4}"),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn tsv_header() -> String {
        TSV_COLUMNS.join("\t")
    }

    /// One tab-separated row in [`TSV_COLUMNS`] order. Per-group F1 is packed
    /// as `group=value` pairs joined by `;`.
    pub fn tsv_row(&self) -> String {
        let groups = self
            .per_group
            .iter()
            .map(|g| format!("{}={:.4}", g.group, g.macro_f1))
            .collect::<Vec<_>>()
            .join(";");
        let flags = self.flags.join("; ").replace('\t', " ");
        [
            self.task.clone(),
            self.examples.to_string(),
            self.grouped_examples.to_string(),
            format!("{:.4}", self.macro_f1),
            format_metric(self.epsilon_deo),
            format_metric(self.epsilon_df),
            format_metric(self.delta_recall),
            format_metric(self.delta_specificity),
            groups,
            flags,
        ]
        .join("\t")
    }
}

pub(crate) fn build(
    spec: &TaskSpec,
    predicted: &[Label],
    truth: &[Label],
    groups: &[Option<GroupId>],
    min_support: f64,
) -> EvalReport {
    let f1 = f1_summary(predicted, truth, spec.kind);
    let mut flags = f1.flags.clone();
    let grouped_examples = groups.iter().filter(|g| g.is_some()).count();

    let schema = &spec.schema;
    let mut per_group = Vec::new();
    if grouped_examples > 0 {
        for (gi, gid) in schema.groups().into_iter().enumerate() {
            let idx: Vec<usize> = groups
                .iter()
                .enumerate()
                .filter(|(_, g)| g.as_ref().is_some_and(|g| schema.group_index(g) == gi))
                .map(|(i, _)| i)
                .collect();
            let label = schema.group_label(&gid);
            if idx.is_empty() {
                flags.push(format!("group {label}: no examples, skipped"));
                continue;
            }
            let p: Vec<Label> = idx.iter().map(|&i| predicted[i].clone()).collect();
            let t: Vec<Label> = idx.iter().map(|&i| truth[i].clone()).collect();
            per_group.push(GroupReport {
                group: label,
                support: idx.len(),
                macro_f1: f1_summary(&p, &t, spec.kind).macro_f1,
            });
        }
    }

    let (mut epsilon_deo_v, mut epsilon_df_v, mut dr, mut ds) = (None, None, None, None);
    if grouped_examples == 0 {
        flags.push("no grouped examples: fairness metrics unavailable".into());
    } else {
        let counts = hard_counts(predicted, truth, groups, spec);
        let deo = epsilon_deo(&counts, min_support);
        let df = epsilon_df(&counts, min_support);
        if deo.is_infinite() {
            flags.push("epsilon_deo infinite: a zero rate faces a nonzero rate".into());
        }
        if df.is_infinite() {
            flags.push("epsilon_df infinite: a zero rate faces a nonzero rate".into());
        }
        epsilon_deo_v = Some(deo);
        epsilon_df_v = Some(df);
        if let Some(d) = delta_metrics(&counts, min_support) {
            if d.degenerate {
                flags.push("fewer than two groups to compare for recall or specificity".into());
            }
            dr = Some(d.recall);
            ds = Some(d.specificity);
        }
    }

    EvalReport {
        task: spec.name.clone(),
        kind: spec.kind,
        examples: predicted.len(),
        grouped_examples,
        macro_f1: f1.macro_f1,
        per_class_f1: f1.per_class,
        per_group,
        epsilon_deo: epsilon_deo_v,
        epsilon_df: epsilon_df_v,
        delta_recall: dr,
        delta_specificity: ds,
        flags,
    }
}

/// `Option<f64>` where infinity is written as `"inf"`.
pub(crate) mod maybe_inf {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(value: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            None => s.serialize_none(),
            Some(v) if v.is_infinite() => s.serialize_some("inf"),
            Some(v) => s.serialize_some(v),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Number(v)) => Ok(Some(v)),
            Some(Repr::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Repr::Text(t)) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", got {t:?}"
            ))),
        }
    }
}
