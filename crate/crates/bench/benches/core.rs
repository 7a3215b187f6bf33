use criterion::{criterion_group, criterion_main, Criterion};
use fairtransfer::diffmath::gradient;
use fairtransfer::fairness::{
    epsilon_deo, epsilon_deo_soft, hard_counts, soft_expected_counts, FairnessConfig, SmoothedCounts,
};
use fairtransfer::harness::{run_trial, ModelConfig, TaskSelection, TrialConfig};
use fairtransfer::model::init_model;
use fairtransfer::objectives::{ObjectiveSpec, Variant};
use fairtransfer::training::TrainConfig;
use fairtransfer_bench::fixture;

fn hard_epsilon(c: &mut Criterion) {
    let (_, data) = fixture(2000, &TaskSelection::single("a"));
    let train = &data[0].train;
    let truth: Vec<_> = train.examples.iter().map(|e| e.label.clone()).collect();
    let mut predicted = truth.clone();
    predicted.rotate_left(7);
    let groups: Vec<_> = train.examples.iter().map(|e| e.groups.clone()).collect();
    c.bench_function("epsilon_deo_hard_2000", |b| {
        b.iter(|| {
            let counts = hard_counts(&predicted, &truth, &groups, &train.spec);
            epsilon_deo(&counts, 1.0)
        })
    });
}

fn soft_epsilon_gradient(c: &mut Criterion) {
    let (_, data) = fixture(256, &TaskSelection::single("a"));
    let encoder = ModelConfig::default().encoder(&data).unwrap();
    let train = &data[0].train;
    let model = init_model(&encoder, std::slice::from_ref(&train.spec), 0).unwrap();
    let batch = &train.examples[..32];
    let features: Vec<_> = batch.iter().map(|e| &e.features).collect();
    let labels: Vec<_> = batch.iter().map(|e| e.label.clone()).collect();
    let groups: Vec<_> = batch.iter().map(|e| e.groups.clone()).collect();
    let cfg = FairnessConfig::default();
    let state = SmoothedCounts::new(train.spec.kind, train.spec.schema.group_count(), cfg.rho);
    c.bench_function("soft_epsilon_gradient_batch32", |b| {
        b.iter(|| {
            let probs = model.predict("a", &features).unwrap();
            let soft = soft_expected_counts(&probs, &labels, &groups, &train.spec);
            let eps = epsilon_deo_soft(&state.blend(&soft).unwrap(), cfg.alpha, cfg.min_support);
            gradient(&eps, &model).unwrap()
        })
    });
}

fn training_epoch(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_one_epoch_1000");
    group.sample_size(10);
    for (name, variant, tasks) in [
        ("stl-base", Variant::StlBase, TaskSelection::single("a")),
        ("mtl-fair", Variant::MtlFair, TaskSelection::pair("a", "b")),
    ] {
        let (source, data) = fixture(1000, &tasks);
        let mut objective = ObjectiveSpec::base(variant);
        if variant == Variant::MtlFair {
            objective = objective.with_fairness("b", FairnessConfig::default());
        }
        let config = TrialConfig {
            data: source,
            tasks,
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            objective,
            pipeline: Default::default(),
            freeze_encoder: false,
            eval: Default::default(),
        };
        group.bench_function(name, |b| b.iter(|| run_trial(&config, &data).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, hard_epsilon, soft_epsilon_gradient, training_epoch);
criterion_main!(benches);
