use super::*;
use crate::data::AttributeSchema;
use crate::diffmath::{evaluate, gradient};

fn task(name: &str, kind: TaskKind) -> TaskSpec {
    TaskSpec::new(name, kind, AttributeSchema::empty())
}

fn small(dim: usize) -> EncoderSpec {
    EncoderSpec {
        input: InputMode::Vector { dim },
        hidden: vec![8, 16],
        activation: Activation::Relu,
    }
}

fn dense(rows: &[Vec<f64>]) -> Vec<Features> {
    rows.iter().map(|r| Features::Dense(r.clone())).collect()
}

fn refs(f: &[Features]) -> Vec<&Features> {
    f.iter().collect()
}

#[test]
fn same_seed_same_parameters() {
    let tasks = [task("a", TaskKind::Binary), task("b", TaskKind::Multiclass(3))];
    let m1 = init_model(&small(5), &tasks, 7).unwrap();
    let m2 = init_model(&small(5), &tasks, 7).unwrap();
    assert_eq!(m1, m2);
    let m3 = init_model(&small(5), &tasks, 8).unwrap();
    assert_ne!(m1, m3);
}

#[test]
fn structure_and_shapes() {
    let tasks = [task("a", TaskKind::Binary), task("b", TaskKind::Multiclass(3))];
    let m = init_model(&small(5), &tasks, 0).unwrap();
    assert_eq!(m.heads.len(), 2);
    assert_eq!(m.component_ids(ENCODER).unwrap().len(), 4);
    let b = m.component_ids("b").unwrap();
    assert_eq!(m.tensor(b[0]).value.shape(), &[16, 3]);
    assert_eq!(m.tensor(b[1]).value.shape(), &[1, 3]);
    assert!(m.tensor(b[1]).value.data().iter().all(|&v| v == 0.0));
    let bound = 1.0 / 5f64.sqrt();
    let w0 = &m.tensors()[0].value;
    assert!(w0.data().iter().all(|v| v.abs() <= bound));
}

#[test]
fn spec_validation() {
    let mut s = small(3);
    s.hidden.clear();
    assert!(init_model(&s, &[], 0).is_err());
    s.hidden = vec![4, 0];
    assert!(init_model(&s, &[], 0).is_err());
    let dup = [task("a", TaskKind::Binary), task("a", TaskKind::Binary)];
    assert!(matches!(
        init_model(&small(3), &dup, 0),
        Err(ModelError::DuplicateTask(_))
    ));
}

#[test]
fn repeated_token_pools_to_its_embedding() {
    let spec = EncoderSpec {
        input: InputMode::Tokens {
            vocab: 10,
            embedding_dim: 4,
        },
        hidden: vec![3],
        activation: Activation::Relu,
    };
    let m = init_model(&spec, &[], 1).unwrap();
    let f = [Features::Tokens(vec![6, 6, 6])];
    let pooled = m.input_matrix(&refs(&f)).unwrap();
    let v = evaluate(&pooled, &m).unwrap();
    assert_eq!(v.row(0), m.tensors()[0].value.row(6));
    let bad = [Features::Tokens(vec![10])];
    assert!(matches!(
        m.encode(&refs(&bad)),
        Err(ModelError::TokenOutOfRange { token: 10, vocab: 10 })
    ));
}

#[test]
fn zero_input_gives_zero_representation() {
    let m = init_model(&small(4), &[], 3).unwrap();
    let f = dense(&[vec![0.0; 4], vec![0.0; 4]]);
    let h = evaluate(&m.encode(&refs(&f)).unwrap(), &m).unwrap();
    assert_eq!(h.shape(), &[2, 16]);
    assert!(h.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_extent_and_feature_checks() {
    let m = init_model(&small(4), &[], 3).unwrap();
    let f = dense(&vec![vec![0.5; 4]; 5]);
    let h = evaluate(&m.encode(&refs(&f)).unwrap(), &m).unwrap();
    assert_eq!(h.shape()[0], 5);
    let wrong = dense(&[vec![1.0; 3]]);
    assert!(matches!(
        m.encode(&refs(&wrong)),
        Err(ModelError::FeatureWidth { expected: 4, found: 3 })
    ));
    let tokens = [Features::Tokens(vec![1])];
    assert!(matches!(m.encode(&refs(&tokens)), Err(ModelError::FeatureMode { .. })));
}

#[test]
fn output_conventions() {
    let tasks = [
        task("mc", TaskKind::Multiclass(4)),
        task("bin", TaskKind::Binary),
        task("ml", TaskKind::Multilabel(3)),
    ];
    let m = init_model(&small(3), &tasks, 9).unwrap();
    let f = dense(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.3, 3.0]]);
    let p = evaluate(&m.predict("mc", &refs(&f)).unwrap(), &m).unwrap();
    for r in 0..2 {
        assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let ml = evaluate(&m.predict("ml", &refs(&f)).unwrap(), &m).unwrap();
    assert_eq!(ml.shape(), &[2, 3]);
    assert!(ml.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(matches!(m.predict("zzz", &refs(&f)), Err(ModelError::UnknownTask(_))));

    // Zero head weights give zero logits.
    let mut z = m.clone();
    for id in z.component_ids("mc").unwrap() {
        z.value_mut(id).data_mut().fill(0.0);
    }
    for id in z.component_ids("bin").unwrap() {
        z.value_mut(id).data_mut().fill(0.0);
    }
    let p = evaluate(&z.predict("mc", &refs(&f)).unwrap(), &z).unwrap();
    assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let p = evaluate(&z.predict("bin", &refs(&f)).unwrap(), &z).unwrap();
    assert!(p.data().iter().all(|&v| v == 0.5));
}

#[test]
fn freezing_components() {
    let tasks = [task("a", TaskKind::Binary)];
    let mut m = init_model(&small(3), &tasks, 0).unwrap();
    m.set_frozen(ENCODER, true).unwrap();
    assert!(m.is_frozen(ParamId(0)));
    assert!(!m.is_frozen(m.component_ids("a").unwrap()[0]));
    assert!(matches!(
        m.set_frozen("nope", true),
        Err(ModelError::UnknownComponent(_))
    ));
    m.set_frozen(ENCODER, false).unwrap();
    assert_eq!(m.frozen_components().count(), 0);
}

#[test]
fn heads_are_independent_and_share_the_encoder() {
    let tasks = [task("a", TaskKind::Binary), task("b", TaskKind::Binary)];
    let m = init_model(&small(3), &tasks, 2).unwrap();
    let f = dense(&[vec![1.0, 0.2, -0.4], vec![0.1, 0.9, 0.7], vec![-1.0, 0.5, 2.0]]);
    let loss = m.predict("a", &refs(&f)).unwrap().ln().mean().neg();
    let g = gradient(&loss, &m).unwrap();
    for id in m.component_ids("b").unwrap() {
        assert!(g.get(&id).is_none_or(|a| a.data().iter().all(|&v| v == 0.0)));
    }
    let enc: f64 = m
        .component_ids(ENCODER)
        .unwrap()
        .iter()
        .map(|id| g[id].data().iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    assert!(enc > 0.0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let tasks = [task("a", TaskKind::Binary), task("b", TaskKind::Multilabel(5))];
    let mut m = init_model(&small(7), &tasks, 11).unwrap();
    m.set_frozen("a", true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    m.save(&path).unwrap();
    let back = ModelParams::load(&path).unwrap();
    assert_eq!(back, m);
    for (x, y) in back.tensors().iter().zip(m.tensors()) {
        for (a, b) in x.value.data().iter().zip(y.value.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn checkpoint_rejects_bad_layout() {
    let m = init_model(&small(3), &[task("a", TaskKind::Binary)], 0).unwrap();
    let text = m.to_json().unwrap().replace("\"hidden\":[8,16]", "\"hidden\":[8,17]");
    assert!(matches!(ModelParams::from_json(&text), Err(ModelError::Checkpoint(_))));
    let text = m.to_json().unwrap().replace("fairtransfer-model/1", "other/9");
    assert!(ModelParams::from_json(&text).is_err());
}

#[test]
fn reset_head_reinitializes() {
    let mut m = init_model(&small(3), &[task("a", TaskKind::Binary)], 0).unwrap();
    let before = m.clone();
    m.reset_head("a", 99).unwrap();
    assert_eq!(m.tensors()[0], before.tensors()[0]);
    let w = m.component_ids("a").unwrap()[0];
    assert_ne!(m.tensor(w).value, before.tensor(w).value);
}
