//! Synthetic task pairs with a controllable demographic shortcut.
//!
//! Every example draws a latent vector `z ~ N(0, I)`. Each task labels its
//! examples with a fixed linear rule on a block of latent dimensions; the two
//! blocks share a fraction `overlap` of their dimensions. Group membership is
//! assigned per attribute by ranking examples on `coupling * label_signal +
//! N(0, 1)`, so groups differ in label prevalence while `z` stays independent
//! of the group given the label. Observed features are `z + noise * N(0, I)`
//! followed by one spurious channel per attribute,
//! `bias * g + sqrt(1 - bias^2) * N(0, 1)` with `g` the standardized group
//! value. A model that reads only the latent block is equalized-odds fair; a
//! model that leans on the spurious channel is not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::split::apportion;
use super::{
    Attribute, AttributeSchema, DataError, Example, Features, GroupId, Label, Split, TaskDataset, TaskKind, TaskSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    pub values: Vec<String>,
    pub proportions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRule {
    pub name: String,
    #[serde(default = "binary")]
    pub kind: TaskKind,
    /// Latent dimensions the label rule reads.
    pub label_dims: usize,
    /// How strongly group membership tracks this task's label.
    pub label_coupling: f64,
    /// Attributes annotated on the training split; dev/test keep all of them.
    #[serde(default)]
    pub annotated: Vec<String>,
}

fn binary() -> TaskKind {
    TaskKind::Binary
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSpec {
    pub splits: SplitSizes,
    pub latent_dim: usize,
    /// Correlation between each standardized group value and its spurious channel.
    pub bias: f64,
    /// Fraction of label dimensions the two tasks share.
    pub overlap: f64,
    /// Observation noise on the latent block.
    pub noise: f64,
    pub attributes: Vec<AttributeSpec>,
    pub tasks: Vec<TaskRule>,
    pub seed: u64,
}

impl BiasSpec {
    /// Desk-scale fairness-transfer pair: one binary attribute annotated on
    /// task `b` only.
    pub fn transfer_default() -> Self {
        Self {
            splits: SplitSizes {
                train: 8000,
                dev: 2000,
                test: 2000,
            },
            latent_dim: 32,
            bias: 0.8,
            overlap: 0.7,
            noise: 1.0,
            attributes: vec![AttributeSpec {
                name: "group".into(),
                values: vec!["g0".into(), "g1".into()],
                proportions: vec![0.5, 0.5],
            }],
            tasks: vec![
                TaskRule {
                    name: "a".into(),
                    kind: TaskKind::Binary,
                    label_dims: 16,
                    label_coupling: 1.0,
                    annotated: Vec::new(),
                },
                TaskRule {
                    name: "b".into(),
                    kind: TaskKind::Binary,
                    label_dims: 16,
                    label_coupling: 1.0,
                    annotated: vec!["group".into()],
                },
            ],
            seed: 0,
        }
    }

    /// Two binary attributes; task `a` sees only the first, task `b` only the second.
    pub fn intersectional_default() -> Self {
        let mut spec = Self::transfer_default();
        spec.attributes = vec![
            AttributeSpec {
                name: "gender".into(),
                values: vec!["f".into(), "m".into()],
                proportions: vec![0.5, 0.5],
            },
            AttributeSpec {
                name: "age".into(),
                values: vec!["u35".into(), "o45".into()],
                proportions: vec![0.5, 0.5],
            },
        ];
        spec.tasks[0].annotated = vec!["gender".into()];
        spec.tasks[1].annotated = vec!["age".into()];
        spec
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if !(0.0..=1.0).contains(&self.bias) {
            return bad(format!("bias {} outside [0, 1]", self.bias));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap {} outside [0, 1]", self.overlap));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        if self.tasks.len() != 2 {
            return bad(format!("expected two tasks, got {}", self.tasks.len()));
        }
        if self.tasks[0].name == self.tasks[1].name {
            return bad("task names must differ".into());
        }
        if self.attributes.is_empty() {
            return bad("at least one attribute is required".into());
        }
        for a in &self.attributes {
            if a.values.len() != a.proportions.len() {
                return bad(format!("attribute {:?}: one proportion per value", a.name));
            }
            let total: f64 = a.proportions.iter().sum();
            if (total - 1.0).abs() > 1e-9 || a.proportions.iter().any(|p| !(*p > 0.0)) {
                return bad(format!(
                    "attribute {:?}: proportions must be positive and sum to 1",
                    a.name
                ));
            }
        }
        self.schema()?;
        for t in &self.tasks {
            t.kind.validate()?;
            if t.label_dims == 0 {
                return bad(format!("task {:?}: label_dims must be positive", t.name));
            }
            for name in &t.annotated {
                if !self.attributes.iter().any(|a| &a.name == name) {
                    return bad(format!("task {:?}: unknown attribute {name:?}", t.name));
                }
            }
        }
        let (_, b_dims) = self.label_blocks();
        let needed = b_dims.iter().max().map_or(0, |m| m + 1).max(self.tasks[0].label_dims);
        if needed > self.latent_dim {
            return bad(format!(
                "latent_dim {} too small: label rules need {needed}",
                self.latent_dim
            ));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<AttributeSchema, DataError> {
        AttributeSchema::new(
            self.attributes
                .iter()
                .map(|a| Attribute {
                    name: a.name.clone(),
                    values: a.values.clone(),
                })
                .collect(),
        )
    }

    pub fn input_width(&self) -> usize {
        self.latent_dim + self.attributes.len()
    }

    /// Latent dimensions read by each task. The first `round(overlap * L_a)`
    /// dimensions are shared; the rest of task b's block is disjoint from a's.
    fn label_blocks(&self) -> (Vec<usize>, Vec<usize>) {
        let la = self.tasks[0].label_dims;
        let lb = self.tasks[1].label_dims;
        let shared = ((self.overlap * la.min(lb) as f64).round() as usize).min(la.min(lb));
        let a: Vec<usize> = (0..la).collect();
        let b: Vec<usize> = (0..shared).chain(la..la + (lb - shared)).collect();
        (a, b)
    }
}

/// All three splits of one generated task, fully annotated.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub rule: TaskRule,
    pub train: TaskDataset,
    pub dev: TaskDataset,
    pub test: TaskDataset,
}

impl SyntheticTask {
    pub fn split(&self, split: Split) -> &TaskDataset {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Training split with only the rule's annotated attributes.
    pub fn training_view(&self) -> TaskDataset {
        if self.rule.annotated.is_empty() {
            self.train.without_groups()
        } else {
            self.train
                .project(&self.rule.annotated)
                .expect("annotated attributes validated")
        }
    }

    /// The split as written to disk: train restricted to annotated attributes.
    pub fn published(&self, split: Split) -> TaskDataset {
        match split {
            Split::Train => self.training_view(),
            _ => self.split(split).clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub spec: BiasSpec,
    pub schema: AttributeSchema,
    pub a: SyntheticTask,
    pub b: SyntheticTask,
}

impl SyntheticPair {
    pub fn tasks(&self) -> [&SyntheticTask; 2] {
        [&self.a, &self.b]
    }
}

/// Generates the task pair described by `spec`; deterministic in `spec.seed`.
pub fn synthesize(spec: &BiasSpec) -> Result<SyntheticPair, DataError> {
    spec.validate()?;
    let schema = spec.schema()?;
    let (a_dims, b_dims) = spec.label_blocks();

    let mut weight_rng = stream(spec.seed, 0);
    let max_rules = spec.tasks.iter().map(|t| rule_count(t.kind)).max().unwrap_or(1);
    // Shared dimensions use the same weights for both tasks.
    let shared: Vec<Vec<f64>> = (0..max_rules)
        .map(|_| {
            (0..spec.latent_dim)
                .map(|_| weight_rng.sample(StandardNormal))
                .collect()
        })
        .collect();
    let mut weights = Vec::new();
    for (t, dims) in spec.tasks.iter().zip([&a_dims, &b_dims]) {
        let own: Vec<Vec<f64>> = (0..rule_count(t.kind))
            .map(|r| {
                let mut w = vec![0.0; spec.latent_dim];
                for &d in dims.iter() {
                    w[d] = if a_dims.contains(&d) && b_dims.contains(&d) {
                        shared[r][d]
                    } else {
                        weight_rng.sample(StandardNormal)
                    };
                }
                w
            })
            .collect();
        weights.push(own);
    }

    let mut tasks = Vec::new();
    for (ti, rule) in spec.tasks.iter().enumerate() {
        let mut splits = Vec::new();
        for (si, split) in Split::ALL.iter().enumerate() {
            let mut rng = stream(spec.seed, 1 + (ti * 3 + si) as u64);
            let examples = generate_split(spec, rule, &weights[ti], *split, &mut rng);
            let task_spec = TaskSpec::new(rule.name.clone(), rule.kind, schema.clone());
            splits.push(TaskDataset::new(task_spec, examples, *split)?);
        }
        let test = splits.pop().unwrap();
        let dev = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        tasks.push(SyntheticTask {
            rule: rule.clone(),
            train,
            dev,
            test,
        });
    }
    let b = tasks.pop().unwrap();
    let a = tasks.pop().unwrap();
    Ok(SyntheticPair {
        spec: spec.clone(),
        schema,
        a,
        b,
    })
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn rule_count(kind: TaskKind) -> usize {
    match kind {
        TaskKind::Binary => 1,
        TaskKind::Multiclass(k) | TaskKind::Multilabel(k) => k,
    }
}

fn generate_split(
    spec: &BiasSpec,
    rule: &TaskRule,
    weights: &[Vec<f64>],
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Vec<Example> {
    let n = spec.splits.get(split);
    let d = spec.latent_dim;
    let latents: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let labels: Vec<Label> = latents.iter().map(|z| label_of(rule.kind, weights, z)).collect();

    let mut groups = vec![Vec::with_capacity(spec.attributes.len()); n];
    let mut standardized = vec![Vec::with_capacity(spec.attributes.len()); n];
    for attr in &spec.attributes {
        let mut scored: Vec<(f64, usize)> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let noise: f64 = rng.sample(StandardNormal);
                (rule.label_coupling * label_signal(rule.kind, l) + noise, i)
            })
            .collect();
        scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let counts = apportion(n, &attr.proportions);
        let mut value_of = vec![0usize; n];
        let mut cursor = 0;
        for (v, &c) in counts.iter().enumerate() {
            for &(_, i) in &scored[cursor..cursor + c] {
                value_of[i] = v;
            }
            cursor += c;
        }
        let (mean, sd) = value_moments(&attr.proportions);
        for i in 0..n {
            groups[i].push(value_of[i]);
            standardized[i].push((value_of[i] as f64 - mean) / sd);
        }
    }

    let spread = (1.0 - spec.bias * spec.bias).max(0.0).sqrt();
    latents
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (z, label))| {
            let mut x: Vec<f64> = z
                .iter()
                .map(|&v| v + spec.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for &g in &standardized[i] {
                x.push(spec.bias * g + spread * rng.sample::<f64, _>(StandardNormal));
            }
            Example {
                id: format!("{}-{}-{i:06}", rule.name, split.as_str()),
                features: Features::Dense(x),
                label,
                groups: Some(GroupId(groups[i].clone())),
            }
        })
        .collect()
}

fn dot(w: &[f64], z: &[f64]) -> f64 {
    w.iter().zip(z).map(|(a, b)| a * b).sum()
}

fn label_of(kind: TaskKind, weights: &[Vec<f64>], z: &[f64]) -> Label {
    match kind {
        TaskKind::Binary => Label::Class(usize::from(dot(&weights[0], z) > 0.0)),
        TaskKind::Multiclass(_) => {
            let scores: Vec<f64> = weights.iter().map(|w| dot(w, z)).collect();
            let mut best = 0;
            for (i, s) in scores.iter().enumerate() {
                if *s > scores[best] {
                    best = i;
                }
            }
            Label::Class(best)
        }
        TaskKind::Multilabel(_) => Label::Multi(weights.iter().map(|w| dot(w, z) > 0.0).collect()),
    }
}

/// Label mapped to [-1, 1]; group value 0 ranks with high signal.
fn label_signal(kind: TaskKind, label: &Label) -> f64 {
    match (kind, label) {
        (TaskKind::Multiclass(k), Label::Class(c)) => 2.0 * *c as f64 / (k - 1) as f64 - 1.0,
        (_, Label::Class(c)) => 2.0 * *c as f64 - 1.0,
        (_, Label::Multi(bits)) => {
            if bits[0] {
                1.0
            } else {
                -1.0
            }
        }
    }
}

fn value_moments(proportions: &[f64]) -> (f64, f64) {
    let mean: f64 = proportions.iter().enumerate().map(|(v, p)| v as f64 * p).sum();
    let var: f64 = proportions
        .iter()
        .enumerate()
        .map(|(v, p)| p * (v as f64 - mean).powi(2))
        .sum();
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(bias: f64, train: usize) -> BiasSpec {
        let mut s = BiasSpec::transfer_default();
        s.bias = bias;
        s.splits = SplitSizes {
            train,
            dev: 50,
            test: 50,
        };
        s
    }

    /// Pearson correlation between standardized group and its spurious channel.
    fn channel_correlation(ds: &TaskDataset, width: usize) -> f64 {
        let xs: Vec<f64> = ds
            .examples
            .iter()
            .map(|e| e.groups.as_ref().unwrap().0[0] as f64)
            .collect();
        let ys: Vec<f64> = ds
            .examples
            .iter()
            .map(|e| match &e.features {
                Features::Dense(v) => v[width - 1],
                _ => unreachable!(),
            })
            .collect();
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn zero_bias_leaves_channel_uncorrelated() {
        let spec = small(0.0, 10_000);
        let pair = synthesize(&spec).unwrap();
        let r = channel_correlation(&pair.a.train, spec.input_width());
        assert!(r.abs() < 0.05, "r = {r}");
    }

    #[test]
    fn strong_bias_matches_requested_correlation() {
        let spec = small(0.8, 10_000);
        let pair = synthesize(&spec).unwrap();
        let r = channel_correlation(&pair.a.train, spec.input_width());
        assert!((r.abs() - 0.8).abs() < 0.05, "r = {r}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small(0.5, 200);
        let a = synthesize(&spec).unwrap();
        let b = synthesize(&spec).unwrap();
        assert_eq!(
            serde_json::to_vec(&a.a.train).unwrap(),
            serde_json::to_vec(&b.a.train).unwrap()
        );
        assert_eq!(a, b);
    }

    #[test]
    fn proportions_hold_exactly_per_split() {
        let mut spec = small(0.5, 301);
        spec.attributes[0].proportions = vec![0.3, 0.7];
        let pair = synthesize(&spec).unwrap();
        for task in pair.tasks() {
            for split in Split::ALL {
                let ds = task.split(split);
                let n0 = ds
                    .examples
                    .iter()
                    .filter(|e| e.groups.as_ref().unwrap().0[0] == 0)
                    .count() as f64;
                assert!((n0 - 0.3 * ds.len() as f64).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn transfer_view_hides_task_a_groups() {
        let pair = synthesize(&small(0.8, 100)).unwrap();
        assert_eq!(pair.a.training_view().grouped_count(), 0);
        assert_eq!(pair.b.training_view().grouped_count(), 100);
        assert_eq!(pair.a.dev.grouped_count(), 50);
    }

    #[test]
    fn rejects_out_of_range_bias() {
        let mut spec = small(1.5, 10);
        assert!(synthesize(&spec).is_err());
        spec.bias = 0.5;
        spec.attributes[0].proportions = vec![0.6, 0.6];
        assert!(synthesize(&spec).is_err());
    }

    #[test]
    fn labels_do_not_depend_on_group_given_latent() {
        // Group coupling shifts prevalence: group 0 ranks with positive labels.
        let pair = synthesize(&small(0.0, 4000)).unwrap();
        let ds = &pair.b.train;
        let rate = |g: usize| {
            let members: Vec<_> = ds
                .examples
                .iter()
                .filter(|e| e.groups.as_ref().unwrap().0[0] == g)
                .collect();
            members.iter().filter(|e| e.label == Label::Class(1)).count() as f64 / members.len() as f64
        };
        assert!(rate(0) > rate(1) + 0.2);
    }
}
