use serde::{Deserialize, Serialize};

use super::TrialRecord;
use crate::data::Split;
use crate::eval::EvalReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportOptions {
    /// Split whose metrics fill the table.
    pub split: Split,
    /// Add one F1 column per demographic group.
    pub per_group: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            per_group: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub values: Vec<Option<f64>>,
}

/// Methods as rows, metrics as columns. Values are rounded to four decimals
/// so the TSV and JSON renderings agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn round4(v: f64) -> f64 {
    if v.is_finite() {
        format!("{v:.4}").parse().expect("formatted float parses")
    } else {
        v
    }
}

fn cell(v: Option<f64>) -> String {
    match v {
        None => "NA".into(),
        Some(v) if v.is_infinite() => if v > 0.0 { "inf" } else { "-inf" }.into(),
        Some(v) if v.is_nan() => "nan".into(),
        Some(v) => format!("{v:.4}"),
    }
}

impl ReportTable {
    /// `metrics` are the column names after the leading `method` column.
    pub fn new(metrics: &[&str]) -> Self {
        Self {
            columns: std::iter::once("method")
                .chain(metrics.iter().copied())
                .map(String::from)
                .collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, method: &str, values: Vec<Option<f64>>) {
        assert_eq!(values.len() + 1, self.columns.len(), "one value per metric column");
        self.rows.push(ReportRow {
            method: method.to_string(),
            values: values.into_iter().map(|v| v.map(round4)).collect(),
        });
    }

    pub fn value(&self, method: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        let row = self.rows.iter().find(|r| r.method == method)?;
        row.values[c - 1]
    }

    pub fn to_tsv(&self) -> String {
        let mut out = self.columns.join("\t");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.method);
            for v in &row.values {
                out.push('\t');
                out.push_str(&cell(*v));
            }
            out.push('\n');
        }
        out
    }

    /// `{"columns": [...], "rows": [[method, v1, ...], ...]}`; infinite
    /// values become the string `"inf"` and missing ones `null`.
    pub fn to_json(&self) -> String {
        use serde_json::{json, Value};
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = vec![Value::from(r.method.clone())];
                cells.extend(r.values.iter().map(|v| match v {
                    None => Value::Null,
                    Some(x) if x.is_finite() => json!(x),
                    Some(x) => Value::from(cell(Some(*x))),
                }));
                Value::Array(cells)
            })
            .collect();
        let doc = json!({ "columns": self.columns, "rows": rows });
        serde_json::to_string_pretty(&doc).expect("table serializes") + "\n"
    }
}

fn split_report<'a>(trial: &'a TrialRecord, task: &str, split: Split) -> Option<&'a EvalReport> {
    match split {
        Split::Test => trial.test.get(task),
        Split::Dev => trial.dev.get(task),
        Split::Train => None,
    }
}

/// One row per method with the target task's macro-F1 and ε-DEO, plus one
/// F1 column per group (first-seen order) when `per_group` is set.
pub fn emit_report(selected: &[(&str, &TrialRecord)], target: &str, options: &ReportOptions) -> ReportTable {
    let reports: Vec<Option<&EvalReport>> = selected
        .iter()
        .map(|(_, t)| split_report(t, target, options.split))
        .collect();
    let mut groups: Vec<String> = Vec::new();
    if options.per_group {
        for r in reports.iter().flatten() {
            for g in &r.per_group {
                if !groups.contains(&g.group) {
                    groups.push(g.group.clone());
                }
            }
        }
    }
    let group_cols: Vec<String> = groups.iter().map(|g| format!("f1[{g}]")).collect();
    let mut metrics = vec!["macro_f1", "epsilon_deo"];
    metrics.extend(group_cols.iter().map(String::as_str));
    let mut table = ReportTable::new(&metrics);
    for ((method, _), report) in selected.iter().zip(&reports) {
        let mut values = vec![report.map(|r| r.macro_f1), report.and_then(|r| r.epsilon_deo)];
        for g in &groups {
            values.push(report.and_then(|r| r.per_group.iter().find(|x| &x.group == g).map(|x| x.macro_f1)));
        }
        table.push(method, values);
    }
    table
}

fn csv_num(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(v) => cell(Some(v)),
    }
}

/// Plot series of dev ε-DEO against λ: one line per completed trial with a
/// penalty.
pub fn lambda_csv(methods: &[(&str, &[TrialRecord])], target: &str) -> String {
    let mut out =
        String::from("method,trial,seed,lambda,rho,burn_in,learning_rate,batch_size,dev_macro_f1,dev_epsilon_deo\n");
    for (method, trials) in methods {
        for t in trials.iter().filter(|t| t.completed()) {
            let Some(f) = t.point.fairness else { continue };
            let dev = t.dev.get(target);
            out.push_str(&format!(
                "{method},{},{},{},{},{},{},{},{},{}\n",
                t.index,
                t.point.seed,
                f.lambda,
                f.rho,
                f.burn_in,
                t.point.learning_rate,
                t.point.batch_size,
                csv_num(dev.map(|r| r.macro_f1)),
                csv_num(dev.and_then(|r| r.epsilon_deo)),
            ));
        }
    }
    out
}

/// Fairness-performance frontier: every completed trial's dev F1 and ε-DEO,
/// with `pareto = 1` for trials no other trial of the same method beats on
/// both.
pub fn frontier_csv(methods: &[(&str, &[TrialRecord])], target: &str) -> String {
    let mut out = String::from("method,trial,dev_macro_f1,dev_epsilon_deo,pareto\n");
    for (method, trials) in methods {
        let points: Vec<(usize, f64, f64)> = trials
            .iter()
            .filter(|t| t.completed())
            .filter_map(|t| {
                let r = t.dev.get(target)?;
                Some((t.index, r.macro_f1, r.epsilon_deo.unwrap_or(f64::INFINITY)))
            })
            .collect();
        for &(i, f1, eps) in &points {
            let dominated = points
                .iter()
                .any(|&(_, f, e)| f >= f1 && e <= eps && (f > f1 || e < eps));
            out.push_str(&format!(
                "{method},{i},{},{},{}\n",
                cell(Some(f1)),
                cell(Some(eps)),
                u8::from(!dominated)
            ));
        }
    }
    out
}
