//! Shared encoder with one classification head per task.
//!
//! Parameters live in a flat tensor list; a tensor's [`ParamId`] is its index
//! in that list, so a [`ModelParams`] value doubles as the [`ParamSource`] for
//! every expression it builds. Tensors belong to a component: `encoder` or a
//! task name. Frozen components are skipped by the optimizer.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Features, TaskKind, TaskSpec};
use crate::diffmath::{Array, Expr, ParamId, ParamSource};

pub const ENCODER: &str = "encoder";
const CHECKPOINT_FORMAT: &str = "fairtransfer-model/1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid encoder spec: {0}")]
    Spec(String),
    #[error("token {token} outside a vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("expected {expected} input features, found {found}")]
    FeatureWidth { expected: usize, found: usize },
    #[error("encoder takes {expected} inputs, got {found}")]
    FeatureMode {
        expected: &'static str,
        found: &'static str,
    },
    #[error("no head for task `{0}`")]
    UnknownTask(String),
    #[error("no component named `{0}`")]
    UnknownComponent(String),
    #[error("duplicate task `{0}`")]
    DuplicateTask(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InputMode {
    Vector { dim: usize },
    Tokens { vocab: usize, embedding_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub input: InputMode,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl EncoderSpec {
    /// Two relu layers of width 64 over `dim` real inputs.
    pub fn vector(dim: usize) -> Self {
        Self {
            input: InputMode::Vector { dim },
            hidden: default_hidden(),
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self.input {
            InputMode::Vector { dim: 0 } => return Err(ModelError::Spec("input dim must be >= 1".into())),
            InputMode::Tokens { vocab, embedding_dim } if vocab == 0 || embedding_dim == 0 => {
                return Err(ModelError::Spec("vocab and embedding_dim must be >= 1".into()))
            }
            _ => {}
        }
        if self.hidden.is_empty() {
            return Err(ModelError::Spec("at least one hidden layer is required".into()));
        }
        if self.hidden.contains(&0) {
            return Err(ModelError::Spec("hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    fn first_width(&self) -> usize {
        match self.input {
            InputMode::Vector { dim } => dim,
            InputMode::Tokens { embedding_dim, .. } => embedding_dim,
        }
    }

    pub fn output_width(&self) -> usize {
        *self.hidden.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub component: String,
    pub value: Array,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task: String,
    pub kind: TaskKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderSpec,
    pub seed: u64,
    pub heads: Vec<HeadSpec>,
    tensors: Vec<Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamSource for ModelParams {
    fn param(&self, id: ParamId) -> Option<&Array> {
        self.tensors.get(id.0 as usize).map(|t| &t.value)
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Array::matrix(rows, cols, data).expect("shape")
}

/// Initializes an encoder and one head per task. Weights are uniform in
/// ±1/√fan_in and biases are zero. The encoder draws from RNG stream 0 and
/// head `k` from stream `k + 1`.
pub fn init_model(encoder: &EncoderSpec, tasks: &[TaskSpec], seed: u64) -> Result<ModelParams, ModelError> {
    encoder.validate()?;
    let mut params = ModelParams {
        encoder: encoder.clone(),
        seed,
        heads: Vec::new(),
        tensors: Vec::new(),
        frozen: BTreeSet::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    if let InputMode::Tokens { vocab, embedding_dim } = encoder.input {
        let table = uniform_init(&mut rng, vocab, embedding_dim, embedding_dim);
        params.push(ENCODER, "embedding", table);
    }
    let mut width = encoder.first_width();
    for (layer, &next) in encoder.hidden.iter().enumerate() {
        let w = uniform_init(&mut rng, width, next, width);
        params.push(ENCODER, &format!("w{layer}"), w);
        params.push(ENCODER, &format!("b{layer}"), Array::zeros(&[1, next]));
        width = next;
    }
    for task in tasks {
        params.attach_head(task)?;
    }
    Ok(params)
}

impl ModelParams {
    fn push(&mut self, component: &str, name: &str, value: Array) -> ParamId {
        let id = ParamId(self.tensors.len() as u32);
        self.tensors.push(Tensor {
            name: format!("{component}.{name}"),
            component: component.to_string(),
            value,
        });
        id
    }

    fn find(&self, name: &str) -> ParamId {
        let pos = self
            .tensors
            .iter()
            .position(|t| t.name == name)
            .unwrap_or_else(|| panic!("missing tensor {name}"));
        ParamId(pos as u32)
    }

    /// Adds a freshly initialized head for `task`.
    pub fn attach_head(&mut self, task: &TaskSpec) -> Result<(), ModelError> {
        if task.name == ENCODER {
            return Err(ModelError::Spec(format!("`{ENCODER}` is reserved")));
        }
        if self.head(&task.name).is_some() {
            return Err(ModelError::DuplicateTask(task.name.clone()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.heads.len() as u64 + 1);
        let width = self.encoder.output_width();
        let out = task.kind.output_width();
        let w = uniform_init(&mut rng, width, out, width);
        self.push(&task.name, "w", w);
        self.push(&task.name, "b", Array::zeros(&[1, out]));
        self.heads.push(HeadSpec {
            task: task.name.clone(),
            kind: task.kind,
        });
        Ok(())
    }

    /// Re-draws a task head's weights with a new seed and zeroes its bias.
    pub fn reset_head(&mut self, task: &str, seed: u64) -> Result<(), ModelError> {
        let index = self
            .heads
            .iter()
            .position(|h| h.task == task)
            .ok_or_else(|| ModelError::UnknownTask(task.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64 + 1);
        let width = self.encoder.output_width();
        let out = self.heads[index].kind.output_width();
        let w = self.find(&format!("{task}.w"));
        self.tensors[w.0 as usize].value = uniform_init(&mut rng, width, out, width);
        let b = self.find(&format!("{task}.b"));
        self.tensors[b.0 as usize].value = Array::zeros(&[1, out]);
        Ok(())
    }

    pub fn head(&self, task: &str) -> Option<&HeadSpec> {
        self.heads.iter().find(|h| h.task == task)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(|i| ParamId(i as u32))
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0 as usize]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.tensors[id.0 as usize].value
    }

    /// Parameter ids owned by `component`.
    pub fn component_ids(&self, component: &str) -> Result<Vec<ParamId>, ModelError> {
        self.check_component(component)?;
        Ok(self
            .ids()
            .filter(|id| self.tensor(*id).component == component)
            .collect())
    }

    fn check_component(&self, component: &str) -> Result<(), ModelError> {
        if component == ENCODER || self.head(component).is_some() {
            Ok(())
        } else {
            Err(ModelError::UnknownComponent(component.to_string()))
        }
    }

    pub fn set_frozen(&mut self, component: &str, frozen: bool) -> Result<(), ModelError> {
        self.check_component(component)?;
        if frozen {
            self.frozen.insert(component.to_string());
        } else {
            self.frozen.remove(component);
        }
        Ok(())
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(&self.tensor(id).component)
    }

    pub fn frozen_components(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Copies every tensor into an id-keyed map.
    pub fn values(&self) -> BTreeMap<ParamId, Array> {
        self.ids().map(|id| (id, self.tensor(id).value.clone())).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    fn input_matrix(&self, features: &[&Features]) -> Result<Expr, ModelError> {
        let n = features.len();
        match self.encoder.input {
            InputMode::Vector { dim } => {
                let mut data = Vec::with_capacity(n * dim);
                for f in features {
                    match f {
                        Features::Dense(v) if v.len() == dim => data.extend_from_slice(v),
                        Features::Dense(v) => {
                            return Err(ModelError::FeatureWidth {
                                expected: dim,
                                found: v.len(),
                            })
                        }
                        Features::Tokens(_) => {
                            return Err(ModelError::FeatureMode {
                                expected: "dense",
                                found: "token",
                            })
                        }
                    }
                }
                Ok(Expr::constant(Array::matrix(n, dim, data).expect("shape")))
            }
            InputMode::Tokens { vocab, .. } => {
                // Mean pooling as a (batch × vocab) weight matrix times the table.
                let mut pool = vec![0.0; n * vocab];
                for (i, f) in features.iter().enumerate() {
                    let Features::Tokens(tokens) = f else {
                        return Err(ModelError::FeatureMode {
                            expected: "token",
                            found: "dense",
                        });
                    };
                    let share = 1.0 / tokens.len().max(1) as f64;
                    for &t in tokens {
                        if t >= vocab {
                            return Err(ModelError::TokenOutOfRange { token: t, vocab });
                        }
                        pool[i * vocab + t] += share;
                    }
                }
                let pool = Expr::constant(Array::matrix(n, vocab, pool).expect("shape"));
                let table = Expr::param(self.find("encoder.embedding"));
                Ok(pool.matmul(&table))
            }
        }
    }

    fn affine(&self, x: &Expr, rows: usize, w: &str, b: &str) -> Expr {
        let ones = Expr::constant(Array::filled(&[rows, 1], 1.0));
        x.matmul(&Expr::param(self.find(w)))
            .add(&ones.matmul(&Expr::param(self.find(b))))
    }

    /// Shared representation of shape `(batch, encoder output width)`.
    /// An empty token sequence pools to the zero vector.
    pub fn encode(&self, features: &[&Features]) -> Result<Expr, ModelError> {
        let n = features.len();
        let mut h = self.input_matrix(features)?;
        for layer in 0..self.encoder.hidden.len() {
            let z = self.affine(&h, n, &format!("encoder.w{layer}"), &format!("encoder.b{layer}"));
            h = match self.encoder.activation {
                Activation::Relu => z.relu(),
                Activation::Tanh => z.tanh(),
            };
        }
        Ok(h)
    }

    /// Head logits on a precomputed representation.
    pub fn logits(&self, task: &str, representation: &Expr, rows: usize) -> Result<Expr, ModelError> {
        self.head(task)
            .ok_or_else(|| ModelError::UnknownTask(task.to_string()))?;
        Ok(self.affine(representation, rows, &format!("{task}.w"), &format!("{task}.b")))
    }

    /// Class probabilities from a precomputed representation: softmax rows
    /// for multiclass heads, per-slot sigmoids otherwise.
    pub fn head_probabilities(&self, task: &str, representation: &Expr, rows: usize) -> Result<Expr, ModelError> {
        let logits = self.logits(task, representation, rows)?;
        let kind = self.head(task).expect("checked").kind;
        Ok(match kind {
            TaskKind::Multiclass(_) => logits.softmax(),
            TaskKind::Binary | TaskKind::Multilabel(_) => logits.sigmoid(),
        })
    }

    /// Probabilities of shape `(batch, output width)` for `task`.
    pub fn predict(&self, task: &str, features: &[&Features]) -> Result<Expr, ModelError> {
        self.head(task)
            .ok_or_else(|| ModelError::UnknownTask(task.to_string()))?;
        let h = self.encode(features)?;
        self.head_probabilities(task, &h, features.len())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.all_finite())
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        if !self.all_finite() {
            return Err(ModelError::Checkpoint("parameters are not finite".into()));
        }
        let doc = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            model: self.clone(),
        };
        serde_json::to_string(&doc).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let doc: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unsupported format `{}`", doc.format)));
        }
        doc.model.check_layout()?;
        Ok(doc.model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()?).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Verifies that tensor names and shapes agree with the encoder config and heads.
    fn check_layout(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        let mut fresh = init_model(&self.encoder, &[], self.seed)?;
        for h in &self.heads {
            fresh.attach_head(&TaskSpec::new(h.task.clone(), h.kind, Default::default()))?;
        }
        let same = fresh.tensors.len() == self.tensors.len()
            && fresh.tensors.iter().zip(&self.tensors).all(|(a, b)| {
                a.name == b.name
                    && a.component == b.component
                    && a.value.shape() == b.value.shape()
                    && a.value.data().len() == b.value.data().len()
            });
        if !same {
            return Err(ModelError::Checkpoint(
                "tensor layout does not match the encoder spec".into(),
            ));
        }
        for c in &self.frozen {
            self.check_component(c)?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    model: ModelParams,
}

#[cfg(test)]
mod tests;
