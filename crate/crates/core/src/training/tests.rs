use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{Attribute, AttributeSchema, Example, Features, GroupId, Label, Split, TaskKind, TaskSpec};
use crate::diffmath::{Array, ParamId};
use crate::model::{init_model, EncoderSpec, InputMode};

fn schema() -> AttributeSchema {
    AttributeSchema::new(vec![Attribute {
        name: "g".into(),
        values: vec!["x".into(), "y".into()],
    }])
    .unwrap()
}

/// Linearly separable binary data: label is the sign of `w · x`.
fn separable(name: &str, n: usize, seed: u64, split: Split) -> TaskDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = [1.0, -2.0, 0.5, 1.5];
    let examples = (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            Example {
                id: format!("{name}{i}"),
                features: Features::Dense(x),
                label: Label::Class(usize::from(s > 0.0)),
                groups: Some(GroupId(vec![i % 2])),
            }
        })
        .collect();
    TaskDataset::new(TaskSpec::new(name, TaskKind::Binary, schema()), examples, split).unwrap()
}

fn encoder() -> EncoderSpec {
    EncoderSpec {
        input: InputMode::Vector { dim: 4 },
        hidden: vec![16],
        activation: crate::model::Activation::Relu,
    }
}

fn model_for(tasks: &[&TaskDataset], seed: u64) -> ModelParams {
    let specs: Vec<TaskSpec> = tasks.iter().map(|t| t.spec.clone()).collect();
    init_model(&encoder(), &specs, seed).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        batch_size: 16,
        epochs,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn scalar_model(value: f64) -> ModelParams {
    let spec = EncoderSpec {
        input: InputMode::Vector { dim: 1 },
        hidden: vec![1],
        activation: crate::model::Activation::Relu,
    };
    let mut m = init_model(&spec, &[], 0).unwrap();
    m.value_mut(ParamId(0)).data_mut()[0] = value;
    m
}

fn grad(value: f64) -> crate::diffmath::GradientMap {
    let mut g = BTreeMap::new();
    g.insert(ParamId(0), Array::matrix(1, 1, vec![value]).unwrap());
    g
}

#[test]
fn first_adam_step_moves_by_lr_times_sign() {
    for g in [0.3, -7.0] {
        let mut m = scalar_model(1.0);
        let mut s = AdamState::new(&m);
        adam_step(&mut m, &grad(g), &mut s, 0.01, &AdamConfig::default()).unwrap();
        let moved = m.tensor(ParamId(0)).value.data()[0] - 1.0;
        assert!((moved + 0.01 * g.signum()).abs() < 1e-8, "moved {moved}");
    }
}

#[test]
fn zero_gradient_and_frozen_parameters_stay_put() {
    let mut m = scalar_model(1.0);
    let mut s = AdamState::new(&m);
    adam_step(&mut m, &grad(0.0), &mut s, 0.1, &AdamConfig::default()).unwrap();
    assert_eq!(m.tensor(ParamId(0)).value.data()[0], 1.0);
    m.set_frozen("encoder", true).unwrap();
    adam_step(&mut m, &grad(5.0), &mut s, 0.1, &AdamConfig::default()).unwrap();
    assert_eq!(m.tensor(ParamId(0)).value.data()[0], 1.0);
}

#[test]
fn non_finite_gradient_names_parameter() {
    let mut m = scalar_model(1.0);
    let mut s = AdamState::new(&m);
    let err = adam_step(&mut m, &grad(f64::NAN), &mut s, 0.1, &AdamConfig::default()).unwrap_err();
    match err {
        TrainError::NonFiniteGradient { param, step } => {
            assert_eq!(param, "encoder.w0");
            assert_eq!(step, 1);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn clipping_caps_global_norm() {
    let m = scalar_model(1.0);
    let mut g = grad(12.0);
    assert_eq!(clip_gradients(&m, &mut g, 5.0), 12.0);
    assert!((global_norm(&m, &g) - 5.0).abs() < 1e-12);
}

#[test]
fn dynamic_schedule_examples() {
    let p = dynamic_schedule(&[0.5, 0.9], 0.05);
    assert!((p[0] - 5.0 / 6.0).abs() < 1e-12);
    assert!((p[1] - 1.0 / 6.0).abs() < 1e-12);
    assert_eq!(dynamic_schedule(&[0.7, 0.7], 0.05), vec![0.5, 0.5]);
    let p = dynamic_schedule(&[1.0, 0.0], 0.05);
    assert!((p[0] - 0.05 / 1.05).abs() < 1e-12);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let a = separable("a", 64, 1, Split::Train);
    let m = model_for(&[&a], 5);
    let (out, h) = train(
        &ObjectiveSpec::base(Variant::StlBase),
        &[TaskData { train: &a, dev: None }],
        m.clone(),
        &config(0),
    )
    .unwrap();
    assert_eq!(out, m);
    assert!(h.steps.is_empty());
}

#[test]
fn stl_fits_separable_data() {
    let a = separable("a", 256, 1, Split::Train);
    let m = model_for(&[&a], 5);
    let (_, h) = train(
        &ObjectiveSpec::base(Variant::StlBase),
        &[TaskData { train: &a, dev: None }],
        m,
        &TrainConfig {
            learning_rate: 0.02,
            ..config(20)
        },
    )
    .unwrap();
    let last_epoch: Vec<f64> = h
        .steps
        .iter()
        .filter(|s| s.epoch == 19)
        .map(|s| s.losses["a"])
        .collect();
    let mean = last_epoch.iter().sum::<f64>() / last_epoch.len() as f64;
    assert!(mean < 0.1, "final train loss {mean}");
}

#[test]
fn training_is_deterministic() {
    let a = separable("a", 100, 1, Split::Train);
    let b = separable("b", 80, 2, Split::Train);
    let bd = separable("b", 40, 9, Split::Dev);
    let spec = ObjectiveSpec::base(Variant::MtlFair).with_fairness("b", FairnessConfig::default());
    let run = || {
        train(
            &spec,
            &[
                TaskData { train: &a, dev: None },
                TaskData {
                    train: &b,
                    dev: Some(&bd),
                },
            ],
            model_for(&[&a, &b], 4),
            &config(3),
        )
        .unwrap()
    };
    let (m1, h1) = run();
    let (m2, h2) = run();
    assert_eq!(m1, m2);
    assert_eq!(h1, h2);
}

#[test]
fn frozen_encoder_is_unchanged_and_heads_train() {
    let a = separable("a", 160, 1, Split::Train);
    let mut m = model_for(&[&a], 5);
    m.set_frozen("encoder", true).unwrap();
    let (out, h) = train(
        &ObjectiveSpec::base(Variant::StlBase),
        &[TaskData { train: &a, dev: None }],
        m.clone(),
        &config(1),
    )
    .unwrap();
    assert_eq!(h.steps.len(), 10);
    for id in m.component_ids("encoder").unwrap() {
        assert_eq!(out.tensor(id), m.tensor(id));
    }
    let w = m.component_ids("a").unwrap()[0];
    assert_ne!(out.tensor(w), m.tensor(w));
}

#[test]
fn unfrozen_training_updates_every_parameter() {
    let a = separable("a", 160, 1, Split::Train);
    let m = model_for(&[&a], 5);
    let (out, _) = train(
        &ObjectiveSpec::base(Variant::StlBase),
        &[TaskData { train: &a, dev: None }],
        m.clone(),
        &config(1),
    )
    .unwrap();
    for id in m.ids() {
        assert_ne!(out.tensor(id), m.tensor(id), "{}", m.tensor(id).name);
    }
}

#[test]
fn frozen_head_still_learns_through_encoder() {
    let a = separable("a", 256, 1, Split::Train);
    let mut m = model_for(&[&a], 5);
    m.set_frozen("a", true).unwrap();
    let (_, h) = train(
        &ObjectiveSpec::base(Variant::StlBase),
        &[TaskData { train: &a, dev: None }],
        m,
        &config(10),
    )
    .unwrap();
    let first: f64 = h.steps[..16].iter().map(|s| s.losses["a"]).sum();
    let last: f64 = h.steps[h.steps.len() - 16..].iter().map(|s| s.losses["a"]).sum();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn uniform_mtl_draws_both_tasks_every_step() {
    let a = separable("a", 100, 1, Split::Train);
    let b = separable("b", 70, 2, Split::Train);
    let (_, h) = train(
        &ObjectiveSpec::base(Variant::MtlBase),
        &[TaskData { train: &a, dev: None }, TaskData { train: &b, dev: None }],
        model_for(&[&a, &b], 4),
        &config(2),
    )
    .unwrap();
    for epoch in 0..2 {
        let steps: Vec<_> = h.steps.iter().filter(|s| s.epoch == epoch).collect();
        assert_eq!(steps.len(), 7);
        let na = steps.iter().filter(|s| s.tasks.contains(&"a".into())).count();
        let nb = steps.iter().filter(|s| s.tasks.contains(&"b".into())).count();
        assert!(na.abs_diff(nb) <= 1);
    }
}

#[test]
fn penalties_are_zero_during_burn_in() {
    let a = separable("a", 100, 1, Split::Train);
    let b = separable("b", 100, 2, Split::Train);
    let cfg = FairnessConfig {
        burn_in: 0.5,
        lambda: 1.0,
        ..FairnessConfig::default()
    };
    let (_, h) = train(
        &ObjectiveSpec::base(Variant::MtlFair).with_fairness("b", cfg),
        &[TaskData { train: &a, dev: None }, TaskData { train: &b, dev: None }],
        model_for(&[&a, &b], 4),
        &config(4),
    )
    .unwrap();
    let total = h.steps.len();
    assert_eq!(total, 28);
    for s in &h.steps[..total / 2] {
        assert_eq!(s.penalties["b"], 0.0);
        assert!(s.soft_epsilon.contains_key("b"));
    }
    assert!(h.steps[..total / 2].iter().any(|s| s.soft_epsilon["b"] > 0.0));
    assert!(h.steps[total / 2..].iter().any(|s| s.penalties["b"] > 0.0));
}

#[test]
fn fairness_target_without_groups_is_rejected() {
    let a = separable("a", 50, 1, Split::Train);
    let b = separable("b", 50, 2, Split::Train).without_groups();
    let err = train(
        &ObjectiveSpec::base(Variant::MtlFair).with_fairness("b", FairnessConfig::default()),
        &[TaskData { train: &a, dev: None }, TaskData { train: &b, dev: None }],
        model_for(&[&a, &b], 4),
        &config(1),
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::Config(_)), "{err}");
}

#[test]
fn dynamic_scheduler_probabilities_are_recorded() {
    let a = separable("a", 100, 1, Split::Train);
    let b = separable("b", 100, 2, Split::Train);
    let ad = separable("a", 50, 11, Split::Dev);
    let bd = separable("b", 50, 12, Split::Dev);
    let (_, h) = train(
        &ObjectiveSpec::base(Variant::MtlBase),
        &[
            TaskData {
                train: &a,
                dev: Some(&ad),
            },
            TaskData {
                train: &b,
                dev: Some(&bd),
            },
        ],
        model_for(&[&a, &b], 4),
        &TrainConfig {
            scheduler: Scheduler::Dynamic,
            ..config(3)
        },
    )
    .unwrap();
    assert_eq!(h.steps.len(), 42);
    assert!(h.steps.iter().all(|s| s.tasks.len() == 1));
    assert_eq!(h.evals.len(), 3);
    for e in &h.evals {
        let sum: f64 = e.schedule.values().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(e.schedule.values().all(|&p| p >= 0.05 / 1.05 - 1e-12));
    }
}

#[test]
fn resume_from_checkpoint_is_bit_identical() {
    let a = separable("a", 90, 1, Split::Train);
    let b = separable("b", 60, 2, Split::Train);
    let ad = separable("a", 30, 11, Split::Dev);
    let bd = separable("b", 30, 12, Split::Dev);
    let dir = tempfile::tempdir().unwrap();
    let spec = ObjectiveSpec::base(Variant::MtlFair).with_fairness("b", FairnessConfig::default());
    let tasks = [
        TaskData {
            train: &a,
            dev: Some(&ad),
        },
        TaskData {
            train: &b,
            dev: Some(&bd),
        },
    ];
    let cfg = TrainConfig {
        scheduler: Scheduler::Dynamic,
        eval_every: 4,
        checkpoint_every: 7,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..config(2)
    };
    let (full, full_h) = train(&spec, &tasks, model_for(&[&a, &b], 4), &cfg).unwrap();
    let cp = load_checkpoint(&dir.path().join("mtl-fair-step00000014.json")).unwrap();
    assert_eq!(cp.step, 14);
    let (resumed, resumed_h) = resume(&spec, &tasks, &cfg, cp).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(resumed_h, full_h);
}

#[test]
fn stilt_runs_two_tagged_phases() {
    let a = separable("a", 64, 1, Split::Train);
    let b = separable("b", 64, 2, Split::Train);
    let m = model_for(&[&a, &b], 4);
    let cfg = StiltConfig {
        stage_b: config(2),
        stage_a: config(2),
        fairness: FairnessConfig::default(),
        freeze_encoder: true,
    };
    let stage_one = {
        let spec = ObjectiveSpec::base(Variant::StlFair).with_fairness("b", cfg.fairness);
        train(&spec, &[TaskData { train: &b, dev: None }], m.clone(), &cfg.stage_b)
            .unwrap()
            .0
    };
    let (out, h) = stilt_train(
        TaskData { train: &b, dev: None },
        TaskData { train: &a, dev: None },
        m,
        &cfg,
    )
    .unwrap();
    assert_eq!(h.phases.len(), 2);
    assert_eq!(h.phases[0].name, "b");
    assert_eq!(h.phases[1].name, "a");
    assert_eq!(h.phases[0].end_step, h.phases[1].start_step);
    assert!(h.steps.windows(2).all(|w| w[0].step < w[1].step));
    for id in out.component_ids("encoder").unwrap() {
        assert_eq!(out.tensor(id), stage_one.tensor(id));
    }
    assert_eq!(out.frozen_components().count(), 0);
}
