//! Dataset types, JSONL ingestion, splitting, batching and the synthetic
//! two-task generator.

mod batch;
mod files;
mod jsonl;
mod split;
mod synth;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{make_batches, BatchMode};
pub use files::{
    load_task_dir, read_manifest, write_synthetic_dir, DatasetManifest, FileEntry, TaskSplits, MANIFEST_FILE,
};
pub use jsonl::{load_jsonl, write_jsonl};
pub use split::{stratified_split, SplitOutcome, StratifyKey};
pub use synth::{synthesize, AttributeSpec, BiasSpec, SplitSizes, SyntheticPair, SyntheticTask, TaskRule};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("invalid task spec: {0}")]
    Task(String),
    #[error("{path}:{line}: malformed record: {detail}")]
    Malformed { path: String, line: usize, detail: String },
    #[error("record {id}: {detail}")]
    Record { id: String, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A discrete demographic attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<String>,
}

/// Ordered set of attributes; groups are the cross product of their values.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<Attribute>", into = "Vec<Attribute>")]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
}

impl TryFrom<Vec<Attribute>> for AttributeSchema {
    type Error = DataError;
    fn try_from(attributes: Vec<Attribute>) -> Result<Self, DataError> {
        Self::new(attributes)
    }
}

impl From<AttributeSchema> for Vec<Attribute> {
    fn from(s: AttributeSchema) -> Self {
        s.attributes
    }
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self, DataError> {
        for (i, a) in attributes.iter().enumerate() {
            if attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(DataError::Schema(format!("duplicate attribute {:?}", a.name)));
            }
            if a.values.len() < 2 {
                return Err(DataError::Schema(format!(
                    "attribute {:?} needs at least two values",
                    a.name
                )));
            }
            for (j, v) in a.values.iter().enumerate() {
                if a.values[..j].contains(v) {
                    return Err(DataError::Schema(format!("attribute {:?} repeats value {v:?}", a.name)));
                }
            }
        }
        Ok(Self { attributes })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    /// Number of attributes (p).
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    /// Size of the cross product; zero for an empty schema.
    pub fn group_count(&self) -> usize {
        if self.attributes.is_empty() {
            0
        } else {
            self.attributes.iter().map(|a| a.values.len()).product()
        }
    }

    /// Mixed-radix index of `group`, first attribute most significant.
    pub fn group_index(&self, group: &GroupId) -> usize {
        self.attributes
            .iter()
            .zip(&group.0)
            .fold(0, |acc, (a, &v)| acc * a.values.len() + v)
    }

    pub fn group_at(&self, mut index: usize) -> GroupId {
        let mut values = vec![0; self.attributes.len()];
        for (slot, a) in values.iter_mut().zip(&self.attributes).rev() {
            *slot = index % a.values.len();
            index /= a.values.len();
        }
        GroupId(values)
    }

    /// Every group in index order.
    pub fn groups(&self) -> Vec<GroupId> {
        (0..self.group_count()).map(|i| self.group_at(i)).collect()
    }

    /// Human-readable label such as `f-u35`.
    pub fn group_label(&self, group: &GroupId) -> String {
        self.attributes
            .iter()
            .zip(&group.0)
            .map(|(a, &v)| a.values[v].as_str())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Resolves a name→value map. Attributes outside the schema are ignored;
    /// if any schema attribute is missing the example is ungrouped (`Ok(None)`).
    pub fn resolve(&self, names: &BTreeMap<String, String>) -> Result<Option<GroupId>, String> {
        if self.attributes.is_empty() {
            return Ok(None);
        }
        let mut values = Vec::with_capacity(self.attributes.len());
        for a in &self.attributes {
            let Some(value) = names.get(&a.name) else {
                return Ok(None);
            };
            let idx = a
                .values
                .iter()
                .position(|v| v == value)
                .ok_or_else(|| format!("value {value:?} is not in attribute {:?}", a.name))?;
            values.push(idx);
        }
        Ok(Some(GroupId(values)))
    }

    pub fn names_of(&self, group: &GroupId) -> BTreeMap<String, String> {
        self.attributes
            .iter()
            .zip(&group.0)
            .map(|(a, &v)| (a.name.clone(), a.values[v].clone()))
            .collect()
    }

    /// Sub-schema keeping the named attributes, in this schema's order.
    pub fn restrict(&self, names: &[String]) -> Result<Self, DataError> {
        for n in names {
            if self.position(n).is_none() {
                return Err(DataError::Schema(format!("unknown attribute {n:?}")));
            }
        }
        Ok(Self {
            attributes: self
                .attributes
                .iter()
                .filter(|a| names.contains(&a.name))
                .cloned()
                .collect(),
        })
    }

    pub fn is_valid(&self, group: &GroupId) -> bool {
        group.0.len() == self.attributes.len() && group.0.iter().zip(&self.attributes).all(|(&v, a)| v < a.values.len())
    }
}

/// One value index per attribute of some schema.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId(pub Vec<usize>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Features {
    Dense(Vec<f64>),
    Tokens(Vec<usize>),
}

impl Features {
    pub fn len(&self) -> usize {
        match self {
            Features::Dense(v) => v.len(),
            Features::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    /// Class index for binary (0/1) and multiclass tasks.
    Class(usize),
    /// Per-slot indicators for multilabel tasks.
    Multi(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub features: Features,
    pub label: Label,
    pub groups: Option<GroupId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Multiclass(usize),
    Multilabel(usize),
}

impl TaskKind {
    /// Width of the head's output layer.
    pub fn output_width(&self) -> usize {
        match *self {
            TaskKind::Binary => 1,
            TaskKind::Multiclass(k) | TaskKind::Multilabel(k) => k,
        }
    }

    /// Independent label slots (count tables) this task produces.
    pub fn slots(&self) -> usize {
        match *self {
            TaskKind::Multilabel(k) => k,
            _ => 1,
        }
    }

    /// Classes per slot.
    pub fn classes(&self) -> usize {
        match *self {
            TaskKind::Multiclass(k) => k,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        match *self {
            TaskKind::Multiclass(k) if k < 2 => Err(DataError::Task(format!("multiclass needs k >= 2, got {k}"))),
            TaskKind::Multilabel(0) => Err(DataError::Task("multilabel needs k >= 1".into())),
            _ => Ok(()),
        }
    }

    /// True class of `label` in slot `slot`.
    pub fn class_in_slot(&self, label: &Label, slot: usize) -> usize {
        match label {
            Label::Class(c) => *c,
            Label::Multi(bits) => usize::from(bits[slot]),
        }
    }

    pub fn check_label(&self, label: &Label) -> Result<(), String> {
        match (*self, label) {
            (TaskKind::Binary, Label::Class(c)) if *c < 2 => Ok(()),
            (TaskKind::Multiclass(k), Label::Class(c)) if *c < k => Ok(()),
            (TaskKind::Multilabel(k), Label::Multi(bits)) if bits.len() == k => Ok(()),
            _ => Err(format!("label {label:?} is outside the label space of {self:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub schema: AttributeSchema,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, kind: TaskKind, schema: AttributeSchema) -> Self {
        Self {
            name: name.into(),
            kind,
            schema,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub examples: Vec<Example>,
    pub split: Split,
}

impl TaskDataset {
    /// Builds a dataset after checking every example against `spec`.
    pub fn new(spec: TaskSpec, examples: Vec<Example>, split: Split) -> Result<Self, DataError> {
        spec.kind.validate()?;
        for ex in &examples {
            validate_example(&spec, ex)?;
        }
        Ok(Self { spec, examples, split })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn grouped_count(&self) -> usize {
        self.examples.iter().filter(|e| e.groups.is_some()).count()
    }

    /// Same examples with every group annotation removed.
    pub fn without_groups(&self) -> Self {
        let mut out = self.clone();
        out.spec.schema = AttributeSchema::empty();
        for ex in &mut out.examples {
            ex.groups = None;
        }
        out
    }

    /// Projects annotations onto a subset of this dataset's attributes.
    pub fn project(&self, keep: &[String]) -> Result<Self, DataError> {
        let schema = self.spec.schema.restrict(keep)?;
        let positions: Vec<usize> = schema
            .attributes()
            .iter()
            .map(|a| self.spec.schema.position(&a.name).expect("restricted"))
            .collect();
        let mut out = self.clone();
        for ex in &mut out.examples {
            ex.groups = if schema.is_empty() {
                None
            } else {
                ex.groups
                    .as_ref()
                    .map(|g| GroupId(positions.iter().map(|&p| g.0[p]).collect()))
            };
        }
        out.spec.schema = schema;
        Ok(out)
    }

    /// Input width for dense features, if all examples agree.
    pub fn dense_width(&self) -> Option<usize> {
        let mut width = None;
        for ex in &self.examples {
            match (&ex.features, width) {
                (Features::Dense(v), None) => width = Some(v.len()),
                (Features::Dense(v), Some(w)) if v.len() == w => {}
                _ => return None,
            }
        }
        width
    }

    /// Stable digest of the dataset contents.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("dataset serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

pub(crate) fn validate_example(spec: &TaskSpec, ex: &Example) -> Result<(), DataError> {
    let err = |detail: String| DataError::Record {
        id: ex.id.clone(),
        detail,
    };
    if ex.features.is_empty() {
        return Err(err("features are empty".into()));
    }
    if let Features::Dense(v) = &ex.features {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(err("features contain a non-finite value".into()));
        }
    }
    spec.kind.check_label(&ex.label).map_err(err)?;
    if let Some(g) = &ex.groups {
        if !spec.schema.is_valid(g) {
            return Err(err(format!("group {g:?} does not fit the task schema")));
        }
    }
    Ok(())
}
