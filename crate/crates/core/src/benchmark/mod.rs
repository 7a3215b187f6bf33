//! Packaged synthetic experiments with pinned configurations and
//! directional assertions: fairness transfer, intersectional fairness, and
//! the consecutive-training comparison.

mod cases;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BiasSpec, TaskSplits};
use crate::eval::EvalOptions;
use crate::fairness::FairnessConfig;
use crate::harness::{
    grid_search, load_data, select_best, DataSource, ExperimentBase, GridOptions, GridSpec, HarnessError, ModelConfig,
    ReportTable, SelectionCriteria, SelectionMode, TaskSelection, TrialRecord,
};
use crate::training::TrainConfig;

pub use cases::{
    intersectional_case, intersectional_swapped_case, run_intersectional_benchmark, run_stilt_comparison,
    run_transfer_benchmark, stilt_case, transfer_case, transfer_control_case, SuiteOutcome, BENCHMARK_SEEDS,
};

/// One trained method of a benchmark: a grid and how its trial is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub tasks: TaskSelection,
    /// Seeds are filled in per benchmark seed.
    pub grid: GridSpec,
    pub selection: SelectionMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MacroF1,
    EpsilonDeo,
    /// Max minus min per-group macro-F1.
    GroupF1Spread,
}

impl Metric {
    pub fn column(self) -> &'static str {
        match self {
            Metric::MacroF1 => "macro_f1",
            Metric::EpsilonDeo => "epsilon_deo",
            Metric::GroupF1Spread => "group_f1_spread",
        }
    }
}

/// How a method's seed-median compares with a baseline's seed-median.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    /// value ≤ (1 − margin) · baseline
    ReducedBy(f64),
    /// value ≥ margin · baseline
    RetainsAtLeast(f64),
    /// value ≤ baseline + margin
    AtMostPlus(f64),
    /// value < margin; the baseline is ignored
    Below(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assertion {
    pub metric: Metric,
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    pub comparator: Comparator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkCase {
    pub name: String,
    pub bias: BiasSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fairness: FairnessConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    pub methods: Vec<MethodSpec>,
    /// Performance-selected method whose dev F1 is the retention reference.
    pub reference: String,
    pub seeds: Vec<u64>,
    /// Aggregated over seeds by the median.
    pub assertions: Vec<Assertion>,
    /// Add per-group F1 columns to the report.
    #[serde(default)]
    pub per_group: bool,
}

/// The selected trial of one method for one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSelection {
    pub seed: u64,
    pub method: String,
    pub index: usize,
    pub hash: String,
    #[serde(skip)]
    pub trial: TrialRecord,
    /// No trial kept enough F1, so the best-F1 trial stands in.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionOutcome {
    pub description: String,
    pub observed: Option<f64>,
    pub required: Option<f64>,
    pub passed: bool,
}

/// Serializes without timings so reruns compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkOutcome {
    pub case: String,
    pub passed: bool,
    pub assertions: Vec<AssertionOutcome>,
    /// Seed medians of the test metrics, one row per method.
    pub report: ReportTable,
    /// Test metrics of every selected trial, one row per method and seed.
    pub per_seed: ReportTable,
    pub selections: Vec<SeedSelection>,
    pub trials_run: usize,
    #[serde(skip)]
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub workers: usize,
    /// Per-trial configs (and checkpoints, if enabled) are written below
    /// `<out_dir>/<case>/seed<k>/<method>/`.
    pub out_dir: Option<PathBuf>,
    pub save_checkpoints: bool,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        let (lo, hi) = (values[n / 2 - 1], values[n / 2]);
        if lo == hi {
            lo
        } else {
            lo + (hi - lo) / 2.0
        }
    })
}

fn target_metric(trial: &TrialRecord, target: &str, metric: Metric) -> Option<f64> {
    let r = trial.test.get(target).or_else(|| trial.dev.get(target))?;
    match metric {
        Metric::MacroF1 => Some(r.macro_f1),
        Metric::EpsilonDeo => r.epsilon_deo,
        Metric::GroupF1Spread => {
            let f: Vec<f64> = r.per_group.iter().map(|g| g.macro_f1).collect();
            let hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
            (!f.is_empty()).then_some(hi - lo)
        }
    }
}

impl BenchmarkCase {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() {
            return bad("benchmark needs at least one seed".into());
        }
        let names: Vec<&str> = self.methods.iter().map(|m| m.name.as_str()).collect();
        match self.methods.iter().find(|m| m.name == self.reference) {
            Some(m) if m.selection == SelectionMode::Performance => {}
            _ => {
                return bad(format!(
                    "reference `{}` must be a performance-selected method",
                    self.reference
                ))
            }
        }
        for a in &self.assertions {
            for m in std::iter::once(&a.method).chain(&a.baseline) {
                if !names.contains(&m.as_str()) {
                    return bad(format!("assertion refers to unknown method `{m}`"));
                }
            }
            if a.baseline.is_none() && !matches!(a.comparator, Comparator::Below(_)) {
                return bad("relative assertions need a baseline".into());
            }
            if a.metric == Metric::GroupF1Spread && !self.per_group {
                return bad("group F1 spread needs per_group".into());
            }
        }
        for m in &self.methods {
            m.grid.validate()?;
        }
        Ok(())
    }

    fn target(&self) -> &str {
        &self.methods[0].tasks.target
    }

    fn experiment(&self, method: &MethodSpec, seed: u64) -> ExperimentBase {
        ExperimentBase {
            data: DataSource::Synthetic(BiasSpec {
                seed,
                ..self.bias.clone()
            }),
            tasks: method.tasks.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            fairness: self.fairness,
            eval: self.eval.clone(),
        }
    }

    /// Performance-selected methods run first so their dev F1 can serve as
    /// the retention reference.
    fn ordered_methods(&self) -> Vec<&MethodSpec> {
        let mut m: Vec<&MethodSpec> = self.methods.iter().collect();
        m.sort_by_key(|x| (x.name != self.reference, x.selection != SelectionMode::Performance));
        m
    }

    fn run_seed(&self, seed: u64, options: &RunOptions) -> Result<(Vec<SeedSelection>, usize), HarnessError> {
        let mut data_cache: BTreeMap<String, Vec<TaskSplits>> = BTreeMap::new();
        let mut reference: Option<f64> = None;
        let mut picked = Vec::new();
        let mut trials_run = 0;
        for method in self.ordered_methods() {
            let base = self.experiment(method, seed);
            let key = serde_json::to_string(&method.tasks).expect("selection serializes");
            if !data_cache.contains_key(&key) {
                data_cache.insert(key.clone(), load_data(&base.data, &base.tasks)?);
            }
            let data = &data_cache[&key];
            let grid = GridSpec {
                seeds: vec![seed],
                ..method.grid.clone()
            };
            let grid_opts = GridOptions {
                workers: 1,
                out_dir: options
                    .out_dir
                    .as_ref()
                    .map(|o| o.join(&self.name).join(format!("seed{seed}")).join(&method.name)),
                save_checkpoints: options.save_checkpoints,
            };
            let trials = grid_search(&grid, &base, data, &grid_opts)?;
            trials_run += trials.len();
            let target = &method.tasks.target;
            let criteria = match method.selection {
                SelectionMode::Performance => SelectionCriteria::performance(target),
                mode => SelectionCriteria {
                    mode,
                    auxiliary: method.tasks.auxiliary.clone(),
                    ..SelectionCriteria::fair(target, reference.expect("reference runs first"))
                },
            };
            let (trial, fallback) = match select_best(&trials, &criteria) {
                Ok(s) => (s.record, false),
                Err(HarnessError::NoQualifyingTrial { .. }) => {
                    log::warn!("{}: no trial retains enough F1 at seed {seed}", method.name);
                    let s = select_best(&trials, &SelectionCriteria::performance(target))?;
                    (s.record, true)
                }
                Err(e) => return Err(e),
            };
            if method.name == self.reference {
                reference = trial.dev.get(target).map(|r| r.macro_f1);
            }
            picked.push(SeedSelection {
                seed,
                method: method.name.clone(),
                index: trial.index,
                hash: trial.hash.clone(),
                trial,
                fallback,
            });
        }
        // Report in declaration order.
        picked.sort_by_key(|s| self.methods.iter().position(|m| m.name == s.method));
        Ok((picked, trials_run))
    }

    fn report_columns(&self, selections: &[SeedSelection]) -> (Vec<String>, Vec<String>) {
        let mut metrics: Vec<String> = vec!["macro_f1".into(), "epsilon_deo".into(), "epsilon_df".into()];
        let mut groups = Vec::new();
        if self.per_group {
            metrics.push("group_f1_spread".into());
            for s in selections {
                if let Some(r) = s.trial.test.get(self.target()) {
                    for g in &r.per_group {
                        if !groups.contains(&g.group) {
                            groups.push(g.group.clone());
                        }
                    }
                }
            }
            metrics.extend(groups.iter().map(|g| format!("f1[{g}]")));
        }
        (metrics, groups)
    }

    fn row(&self, trial: &TrialRecord, groups: &[String]) -> Vec<Option<f64>> {
        let target = self.target();
        let r = trial.test.get(target);
        let mut v = vec![
            target_metric(trial, target, Metric::MacroF1),
            target_metric(trial, target, Metric::EpsilonDeo),
            r.and_then(|r| r.epsilon_df),
        ];
        if self.per_group {
            v.push(target_metric(trial, target, Metric::GroupF1Spread));
            for g in groups {
                v.push(r.and_then(|r| r.per_group.iter().find(|x| &x.group == g).map(|x| x.macro_f1)));
            }
        }
        v
    }

    /// Trains every method for every seed, selects one trial per method and
    /// seed, and checks the assertions on seed medians of test metrics.
    pub fn run(&self, options: &RunOptions) -> Result<BenchmarkOutcome, HarnessError> {
        self.validate()?;
        let start = Instant::now();
        if let Some(out) = &options.out_dir {
            let dir = out.join(&self.name);
            std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
            let path = dir.join("case.json");
            let text = serde_json::to_string_pretty(self).expect("case serializes");
            std::fs::write(&path, text + "\n").map_err(|e| HarnessError::io(&path, e))?;
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers.max(1))
            .build()
            .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
        let per_seed: Vec<(Vec<SeedSelection>, usize)> = pool.install(|| {
            self.seeds
                .par_iter()
                .map(|&s| self.run_seed(s, options))
                .collect::<Result<_, _>>()
        })?;
        let trials_run = per_seed.iter().map(|x| x.1).sum();
        let selections: Vec<SeedSelection> = per_seed.into_iter().flat_map(|x| x.0).collect();

        let (metrics, groups) = self.report_columns(&selections);
        let metric_refs: Vec<&str> = metrics.iter().map(String::as_str).collect();
        let mut per_seed_table = ReportTable::new(&metric_refs);
        for s in &selections {
            per_seed_table.push(&format!("{}@{}", s.method, s.seed), self.row(&s.trial, &groups));
        }
        let mut report = ReportTable::new(&metric_refs);
        for m in &self.methods {
            let rows: Vec<Vec<Option<f64>>> = selections
                .iter()
                .filter(|s| s.method == m.name)
                .map(|s| self.row(&s.trial, &groups))
                .collect();
            let medians = (0..metrics.len())
                .map(|c| {
                    let mut col: Vec<f64> = rows.iter().filter_map(|r| r[c]).collect();
                    median(&mut col)
                })
                .collect();
            report.push(&m.name, medians);
        }

        let medians = |method: &str, metric: Metric| -> Option<f64> {
            let mut v: Vec<f64> = selections
                .iter()
                .filter(|s| s.method == method)
                .filter_map(|s| target_metric(&s.trial, self.target(), metric))
                .collect();
            median(&mut v)
        };
        let assertions: Vec<AssertionOutcome> = self
            .assertions
            .iter()
            .map(|a| {
                let observed = medians(&a.method, a.metric);
                let base = a.baseline.as_deref().and_then(|b| medians(b, a.metric));
                let col = a.metric.column();
                let against = a.baseline.as_deref().unwrap_or("");
                let (required, passed, description) = match a.comparator {
                    Comparator::ReducedBy(m) => {
                        let req = base.map(|b| (1.0 - m) * b);
                        (
                            req,
                            matches!((observed, req), (Some(o), Some(r)) if o <= r),
                            format!(
                                "median {col} of {} at least {:.0}% below {against}",
                                a.method,
                                m * 100.0
                            ),
                        )
                    }
                    Comparator::RetainsAtLeast(m) => {
                        let req = base.map(|b| m * b);
                        (
                            req,
                            matches!((observed, req), (Some(o), Some(r)) if o >= r),
                            format!("median {col} of {} at least {:.0}% of {against}", a.method, m * 100.0),
                        )
                    }
                    Comparator::AtMostPlus(m) => {
                        let req = base.map(|b| b + m);
                        (
                            req,
                            matches!((observed, req), (Some(o), Some(r)) if o <= r),
                            format!("median {col} of {} at most {against} + {m}", a.method),
                        )
                    }
                    Comparator::Below(m) => (
                        Some(m),
                        matches!(observed, Some(o) if o < m),
                        format!("median {col} of {} below {m}", a.method),
                    ),
                };
                AssertionOutcome {
                    description,
                    observed,
                    required,
                    passed,
                }
            })
            .collect();
        Ok(BenchmarkOutcome {
            case: self.name.clone(),
            passed: assertions.iter().all(|a| a.passed),
            assertions,
            report,
            per_seed: per_seed_table,
            selections,
            trials_run,
            runtime_secs: start.elapsed().as_secs_f64(),
        })
    }
}

impl BenchmarkOutcome {
    /// One `PASS`/`FAIL` line per assertion.
    pub fn verdict_lines(&self) -> Vec<String> {
        self.assertions
            .iter()
            .map(|a| {
                format!(
                    "{} [{}] {}: observed {} required {}",
                    if a.passed { "PASS" } else { "FAIL" },
                    self.case,
                    a.description,
                    a.observed.map_or("NA".into(), |v| format!("{v:.4}")),
                    a.required.map_or("NA".into(), |v| format!("{v:.4}")),
                )
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("outcome serializes") + "\n"
    }
}
