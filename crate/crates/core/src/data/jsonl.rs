use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_example, DataError, Example, Features, Label, Split, TaskDataset, TaskKind, TaskSpec};

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    features: RawFeatures,
    label: RawLabel,
    #[serde(default)]
    groups: Option<BTreeMap<String, String>>,
}

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum RawFeatures {
    Dense(Vec<f64>),
    Tokens { tokens: Vec<usize> },
}

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum RawLabel {
    One(i64),
    Many(Vec<i64>),
}

#[derive(Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    features: RawFeatures,
    label: RawLabel,
    #[serde(skip_serializing_if = "Option::is_none")]
    groups: Option<BTreeMap<String, String>>,
}

/// Reads one example per line. Blank lines are skipped, unknown fields ignored.
///
/// Multilabel labels are lists of active slot indices.
pub fn load_jsonl(path: impl AsRef<Path>, spec: &TaskSpec, split: Split) -> Result<TaskDataset, DataError> {
    let path = path.as_ref();
    spec.kind.validate()?;
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            path: path.display().to_string(),
            line: n + 1,
            detail: e.to_string(),
        })?;
        let record_err = |detail: String| DataError::Record {
            id: raw.id.clone(),
            detail,
        };
        let label = convert_label(spec.kind, &raw.label).map_err(record_err)?;
        let groups = match &raw.groups {
            Some(names) => spec.schema.resolve(names).map_err(record_err)?,
            None => None,
        };
        let features = match raw.features {
            RawFeatures::Dense(v) => Features::Dense(v),
            RawFeatures::Tokens { tokens } => Features::Tokens(tokens),
        };
        let ex = Example {
            id: raw.id,
            features,
            label,
            groups,
        };
        validate_example(spec, &ex)?;
        examples.push(ex);
    }
    Ok(TaskDataset {
        spec: spec.clone(),
        examples,
        split,
    })
}

fn convert_label(kind: TaskKind, raw: &RawLabel) -> Result<Label, String> {
    match (kind, raw) {
        (TaskKind::Multilabel(k), RawLabel::Many(active)) => {
            let mut bits = vec![false; k];
            for &i in active {
                if i < 0 || i as usize >= k {
                    return Err(format!("label slot {i} outside 0..{k}"));
                }
                bits[i as usize] = true;
            }
            Ok(Label::Multi(bits))
        }
        (TaskKind::Multilabel(_), RawLabel::One(v)) => Err(format!("label {v} must be a list for a multilabel task")),
        (_, RawLabel::One(v)) => {
            let classes = kind.classes() as i64;
            if *v < 0 || *v >= classes {
                Err(format!("label {v} outside 0..{classes}"))
            } else {
                Ok(Label::Class(*v as usize))
            }
        }
        (_, RawLabel::Many(_)) => Err("list label on a single-label task".into()),
    }
}

/// Writes `dataset` in the format read by [`load_jsonl`].
pub fn write_jsonl(path: impl AsRef<Path>, dataset: &TaskDataset) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    for ex in &dataset.examples {
        let rec = OutRecord {
            id: &ex.id,
            features: match &ex.features {
                Features::Dense(v) => RawFeatures::Dense(v.clone()),
                Features::Tokens(t) => RawFeatures::Tokens { tokens: t.clone() },
            },
            label: match &ex.label {
                Label::Class(c) => RawLabel::One(*c as i64),
                Label::Multi(bits) => RawLabel::Many(
                    bits.iter()
                        .enumerate()
                        .filter_map(|(i, &b)| b.then_some(i as i64))
                        .collect(),
                ),
            },
            groups: ex.groups.as_ref().map(|g| dataset.spec.schema.names_of(g)),
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
