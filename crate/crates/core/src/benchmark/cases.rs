use serde::Serialize;

use super::{Assertion, AssertionOutcome, BenchmarkCase, BenchmarkOutcome, Comparator, MethodSpec, Metric, RunOptions};
use crate::data::BiasSpec;
use crate::fairness::FairnessConfig;
use crate::harness::{GridSpec, HarnessError, ModelConfig, Pipeline, SelectionMode, TaskSelection};
use crate::objectives::Variant;
use crate::training::TrainConfig;

pub const BENCHMARK_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

const LEARNING_RATES: [f64; 2] = [1e-3, 3e-4];
const LAMBDAS: [f64; 6] = [1.0, 2.0, 5.0, 20.0, 50.0, 100.0];
const EPOCHS: usize = 4;

fn grid(variant: Variant) -> GridSpec {
    GridSpec {
        learning_rate: LEARNING_RATES.to_vec(),
        batch_size: vec![32],
        lambda: LAMBDAS.to_vec(),
        rho: vec![0.1],
        burn_in: vec![0.0],
        ..GridSpec::new(variant)
    }
}

fn method(name: &str, tasks: TaskSelection, grid: GridSpec) -> MethodSpec {
    let selection = if grid.has_penalty() {
        SelectionMode::FairWithDemographics
    } else {
        SelectionMode::Performance
    };
    MethodSpec {
        name: name.to_string(),
        tasks,
        grid,
        selection,
    }
}

fn oracle(target: &str) -> TaskSelection {
    TaskSelection {
        oracle_target: true,
        ..TaskSelection::single(target)
    }
}

fn case(name: &str, bias: BiasSpec, seeds: &[u64], methods: Vec<MethodSpec>) -> BenchmarkCase {
    BenchmarkCase {
        name: name.to_string(),
        bias,
        model: ModelConfig::default(),
        train: TrainConfig {
            epochs: EPOCHS,
            ..TrainConfig::default()
        },
        fairness: FairnessConfig::default(),
        eval: Default::default(),
        methods,
        reference: "stl-base".into(),
        seeds: seeds.to_vec(),
        assertions: Vec::new(),
        per_group: false,
    }
}

fn relative(metric: Metric, method: &str, comparator: Comparator) -> Assertion {
    Assertion {
        metric,
        method: method.to_string(),
        baseline: Some("stl-base".into()),
        comparator,
    }
}

/// Task `a` has no training demographics, task `b` does. STL-fair is the
/// oracle that sees `a`'s generator groups.
pub fn transfer_case(seeds: &[u64]) -> BenchmarkCase {
    let mut c = case(
        "transfer",
        BiasSpec::transfer_default(),
        seeds,
        vec![
            method("stl-base", TaskSelection::single("a"), grid(Variant::StlBase)),
            method("stl-fair", oracle("a"), grid(Variant::StlFair)),
            method("mtl-base", TaskSelection::pair("a", "b"), grid(Variant::MtlBase)),
            method("mtl-fair", TaskSelection::pair("a", "b"), grid(Variant::MtlFair)),
        ],
    );
    c.assertions = vec![
        relative(Metric::EpsilonDeo, "mtl-fair", Comparator::ReducedBy(0.2)),
        relative(Metric::MacroF1, "mtl-fair", Comparator::RetainsAtLeast(0.95)),
    ];
    c
}

/// The transfer pair without bias: no method should show a sizable ε.
pub fn transfer_control_case(seeds: &[u64]) -> BenchmarkCase {
    let mut c = transfer_case(seeds);
    c.name = "transfer-control".into();
    c.bias.bias = 0.0;
    c.assertions = c
        .methods
        .iter()
        .map(|m| Assertion {
            metric: Metric::EpsilonDeo,
            method: m.name.clone(),
            baseline: None,
            comparator: Comparator::Below(0.15),
        })
        .collect();
    c
}

/// Task `a` is annotated with the first attribute only, task `b` with the
/// second; `a` is evaluated over the full cross product.
pub fn intersectional_case(seeds: &[u64]) -> BenchmarkCase {
    let mut c = case(
        "intersectional",
        BiasSpec::intersectional_default(),
        seeds,
        vec![
            method("stl-base", TaskSelection::single("a"), grid(Variant::StlBase)),
            method("stl-fair", TaskSelection::single("a"), grid(Variant::StlFair)),
            method("mtl-inter", TaskSelection::pair("a", "b"), grid(Variant::MtlInter)),
        ],
    );
    c.per_group = true;
    c.assertions = vec![
        relative(Metric::EpsilonDeo, "mtl-inter", Comparator::ReducedBy(0.15)),
        relative(Metric::MacroF1, "mtl-inter", Comparator::RetainsAtLeast(0.95)),
        relative(Metric::GroupF1Spread, "mtl-inter", Comparator::AtMostPlus(2.0)),
    ];
    c
}

/// The intersectional case with the two tasks' annotations swapped.
pub fn intersectional_swapped_case(seeds: &[u64]) -> BenchmarkCase {
    let mut c = intersectional_case(seeds);
    c.name = "intersectional-swapped".into();
    let (a, b) = (c.bias.tasks[0].annotated.clone(), c.bias.tasks[1].annotated.clone());
    c.bias.tasks[0].annotated = b;
    c.bias.tasks[1].annotated = a;
    c.assertions.clear();
    c
}

/// Simultaneous against consecutive fair training, each with and without a
/// frozen encoder.
pub fn stilt_case(seeds: &[u64]) -> BenchmarkCase {
    let frozen = |mut g: GridSpec| {
        g.freeze_encoder = true;
        g
    };
    let stilt = |mut g: GridSpec| {
        g.pipeline = Pipeline::Stilt;
        g
    };
    let pair = || TaskSelection::pair("a", "b");
    case(
        "stilt",
        BiasSpec::transfer_default(),
        seeds,
        vec![
            method("stl-base", TaskSelection::single("a"), grid(Variant::StlBase)),
            method("stl-fair", oracle("a"), grid(Variant::StlFair)),
            method("stl-fair-frozen", oracle("a"), frozen(grid(Variant::StlFair))),
            method("stilt-fair", pair(), stilt(grid(Variant::MtlFair))),
            method("stilt-fair-frozen", pair(), frozen(stilt(grid(Variant::MtlFair)))),
            method("mtl-fair", pair(), grid(Variant::MtlFair)),
        ],
    )
}

/// A benchmark run with its controls. Only the main case's assertions
/// decide `passed`; `checks` are logged.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteOutcome {
    pub name: String,
    pub passed: bool,
    pub main: BenchmarkOutcome,
    pub controls: Vec<BenchmarkOutcome>,
    pub checks: Vec<AssertionOutcome>,
}

impl SuiteOutcome {
    fn new(main: BenchmarkOutcome, controls: Vec<BenchmarkOutcome>, checks: Vec<AssertionOutcome>) -> Self {
        Self {
            name: main.case.clone(),
            passed: main.passed,
            main,
            controls,
            checks,
        }
    }

    pub fn runtime_secs(&self) -> f64 {
        self.main.runtime_secs + self.controls.iter().map(|c| c.runtime_secs).sum::<f64>()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("suite serializes") + "\n"
    }

    /// Assertion lines of the main case, then `CHECK` lines for the logged
    /// checks.
    pub fn verdict_lines(&self) -> Vec<String> {
        let mut lines = self.main.verdict_lines();
        for c in &self.checks {
            lines.push(format!(
                "CHECK {} [{}] {}: observed {} required {}",
                if c.passed { "ok" } else { "not met" },
                self.name,
                c.description,
                c.observed.map_or("NA".into(), |v| format!("{v:.4}")),
                c.required.map_or("NA".into(), |v| format!("{v:.4}")),
            ));
        }
        lines
    }
}

/// Transfer benchmark plus the β = 0 control.
pub fn run_transfer_benchmark(seeds: &[u64], options: &RunOptions) -> Result<SuiteOutcome, HarnessError> {
    let main = transfer_case(seeds).run(options)?;
    let control = transfer_control_case(seeds).run(options)?;
    let checks = control
        .assertions
        .iter()
        .map(|a| AssertionOutcome {
            description: format!("beta=0 control: {}", a.description),
            ..a.clone()
        })
        .collect();
    Ok(SuiteOutcome::new(main, vec![control], checks))
}

/// Intersectional benchmark plus the attribute-swap symmetry control.
pub fn run_intersectional_benchmark(seeds: &[u64], options: &RunOptions) -> Result<SuiteOutcome, HarnessError> {
    let main = intersectional_case(seeds).run(options)?;
    let swapped = intersectional_swapped_case(seeds).run(options)?;
    let eps = |o: &BenchmarkOutcome| o.report.value("mtl-inter", "epsilon_deo");
    let diff = match (eps(&main), eps(&swapped)) {
        (Some(x), Some(y)) => Some((x - y).abs()),
        _ => None,
    };
    let checks = vec![AssertionOutcome {
        description: "swapping the annotated attributes moves median epsilon_deo of mtl-inter by less than 0.1".into(),
        observed: diff,
        required: Some(0.1),
        passed: matches!(diff, Some(d) if d < 0.1),
    }];
    Ok(SuiteOutcome::new(main, vec![swapped], checks))
}

/// Consecutive-training comparison. Nothing is asserted; the checks record
/// whether frozen variants lose F1 and whether simultaneous fair training
/// ends up fairer than consecutive fair training at similar F1.
pub fn run_stilt_comparison(seeds: &[u64], options: &RunOptions) -> Result<SuiteOutcome, HarnessError> {
    let main = stilt_case(seeds).run(options)?;
    let v = |m: &str, c: &str| main.report.value(m, c);
    let mut checks = Vec::new();
    for (frozen, full) in [("stl-fair-frozen", "stl-fair"), ("stilt-fair-frozen", "stilt-fair")] {
        let (a, b) = (v(frozen, "macro_f1"), v(full, "macro_f1"));
        checks.push(AssertionOutcome {
            description: format!("median macro_f1 of {frozen} below {full}"),
            observed: a,
            required: b,
            passed: matches!((a, b), (Some(a), Some(b)) if a < b),
        });
    }
    let (fe, se) = (v("mtl-fair", "epsilon_deo"), v("stilt-fair", "epsilon_deo"));
    let (ff, sf) = (v("mtl-fair", "macro_f1"), v("stilt-fair", "macro_f1"));
    let similar = matches!((ff, sf), (Some(a), Some(b)) if a >= 0.95 * b && b >= 0.95 * a);
    checks.push(AssertionOutcome {
        description: "median epsilon_deo of mtl-fair below stilt-fair at macro_f1 within 5%".into(),
        observed: fe,
        required: se,
        passed: similar && matches!((fe, se), (Some(a), Some(b)) if a < b),
    });
    Ok(SuiteOutcome::new(main, Vec::new(), checks))
}
