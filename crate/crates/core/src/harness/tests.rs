use std::collections::BTreeMap;

use super::*;
use crate::data::{BiasSpec, Split, SplitSizes, TaskKind};
use crate::eval::GroupReport;

fn report(task: &str, f1: f64, eps: Option<f64>) -> EvalReport {
    EvalReport {
        task: task.into(),
        kind: TaskKind::Binary,
        examples: 100,
        grouped_examples: if eps.is_some() { 100 } else { 0 },
        macro_f1: f1,
        per_class_f1: vec![Some(f1), Some(f1)],
        per_group: Vec::new(),
        epsilon_deo: eps,
        epsilon_df: eps,
        delta_recall: None,
        delta_specificity: None,
        flags: Vec::new(),
    }
}

fn trial(index: usize, dev: &[(&str, f64, Option<f64>)]) -> TrialRecord {
    TrialRecord {
        index,
        hash: format!("{index:064}"),
        point: GridSpec::new(Variant::MtlFair).points()[0],
        status: TrialStatus::Completed,
        error: None,
        dev: dev.iter().map(|(t, f, e)| (t.to_string(), report(t, *f, *e))).collect(),
        test: BTreeMap::new(),
        checkpoint: None,
        wall_clock_secs: 0.0,
    }
}

fn target_trials(rows: &[(f64, f64)]) -> Vec<TrialRecord> {
    rows.iter()
        .enumerate()
        .map(|(i, &(f, e))| trial(i, &[("a", f, Some(e))]))
        .collect()
}

#[test]
fn base_grid_ignores_fairness_lists() {
    let mut g = GridSpec::new(Variant::StlBase);
    g.learning_rate = vec![1e-3, 1e-4];
    g.batch_size = vec![16, 32];
    assert_eq!(g.size(), 4);
    assert_eq!(g.points().len(), 4);
    assert!(g.points().iter().all(|p| p.fairness.is_none()));
}

#[test]
fn fair_grid_expands_over_penalty_settings() {
    let g = GridSpec::new(Variant::MtlFair);
    assert_eq!(g.size(), 3 * 3 * 3 * 3 * 2);
    assert_eq!(g.points().len(), g.size());
}

#[test]
fn empty_grid_list_is_rejected() {
    let mut g = GridSpec::new(Variant::StlFair);
    g.rho.clear();
    assert!(matches!(g.validate(), Err(HarnessError::Config(_))));
    g.variant = Variant::StlBase;
    assert!(g.validate().is_ok());
}

#[test]
fn seeds_are_outermost() {
    let mut g = GridSpec::new(Variant::StlBase);
    g.learning_rate = vec![1e-3, 1e-4];
    g.batch_size = vec![32];
    g.seeds = vec![7, 9];
    let seeds: Vec<u64> = g.points().iter().map(|p| p.seed).collect();
    assert_eq!(seeds, vec![7, 7, 9, 9]);
}

fn tiny_bias(seed: u64) -> BiasSpec {
    let mut b = BiasSpec::transfer_default();
    b.splits = SplitSizes {
        train: 120,
        dev: 60,
        test: 60,
    };
    b.latent_dim = 6;
    for t in &mut b.tasks {
        t.label_dims = 3;
    }
    b.seed = seed;
    b
}

fn tiny_base(tasks: TaskSelection) -> ExperimentBase {
    ExperimentBase {
        data: DataSource::Synthetic(tiny_bias(1)),
        tasks,
        model: ModelConfig {
            hidden: vec![8],
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        },
        fairness: FairnessConfig::default(),
        eval: EvalOptions::default(),
    }
}

#[test]
fn point_config_places_penalties_per_variant() {
    let base = tiny_base(TaskSelection::pair("a", "b"));
    let mut g = GridSpec::new(Variant::MtlFair);
    g.lambda = vec![0.5];
    g.rho = vec![0.9];
    g.burn_in = vec![1.0];
    let cfg = g.points()[0].config(&base);
    assert_eq!(cfg.objective.fairness.keys().collect::<Vec<_>>(), vec!["b"]);
    let f = cfg.objective.fairness["b"];
    assert_eq!((f.lambda, f.rho), (0.5, 0.9));
    assert_eq!(f.burn_in, 0.5);
    cfg.validate().unwrap();

    g.variant = Variant::MtlInter;
    let cfg = g.points()[0].config(&base);
    assert_eq!(cfg.objective.fairness.len(), 2);

    let base = tiny_base(TaskSelection::single("a"));
    g.variant = Variant::StlFair;
    let cfg = g.points()[0].config(&base);
    assert_eq!(cfg.objective.fairness.keys().collect::<Vec<_>>(), vec!["a"]);
}

#[test]
fn stilt_config_needs_auxiliary_penalty() {
    let base = tiny_base(TaskSelection::pair("a", "b"));
    let mut g = GridSpec::new(Variant::MtlFair);
    g.pipeline = Pipeline::Stilt;
    g.lambda = vec![0.1];
    g.rho = vec![0.1];
    g.burn_in = vec![0.0];
    let mut cfg = g.points()[0].config(&base);
    cfg.validate().unwrap();
    cfg.objective.variant = Variant::MtlInter;
    assert!(cfg.validate().is_err());
}

#[test]
fn trial_config_round_trips_through_json() {
    let base = tiny_base(TaskSelection::pair("a", "b"));
    let cfg = GridSpec::new(Variant::MtlInter).points()[5].config(&base);
    let text = serde_json::to_string(&cfg).unwrap();
    let back: TrialConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn selection_keeps_retention_then_minimizes_epsilon() {
    let trials = target_trials(&[(70.0, 1.0), (68.0, 0.5), (60.0, 0.1)]);
    let s = select_best(&trials, &SelectionCriteria::fair("a", 70.0)).unwrap();
    assert_eq!(s.record.index, 1);
}

#[test]
fn single_qualifying_trial_is_chosen() {
    let trials = target_trials(&[(50.0, 0.1), (69.0, 2.0)]);
    let s = select_best(&trials, &SelectionCriteria::fair("a", 70.0)).unwrap();
    assert_eq!(s.record.index, 1);
}

#[test]
fn performance_mode_ignores_epsilon() {
    let trials = target_trials(&[(70.0, 3.0), (72.0, 9.0), (60.0, 0.0)]);
    let s = select_best(&trials, &SelectionCriteria::performance("a")).unwrap();
    assert_eq!(s.record.index, 1);
    assert_eq!(s.reads, vec!["dev.a.macro_f1"]);
}

#[test]
fn ties_prefer_higher_f1_then_lower_index() {
    let trials = target_trials(&[(68.0, 0.5), (69.0, 0.5), (69.0, 0.5)]);
    let s = select_best(&trials, &SelectionCriteria::fair("a", 70.0)).unwrap();
    assert_eq!(s.record.index, 1);
    let trials = target_trials(&[(70.0, 1.0), (70.0, 1.0)]);
    let s = select_best(&trials, &SelectionCriteria::performance("a")).unwrap();
    assert_eq!(s.record.index, 0);
}

#[test]
fn no_qualifying_trial_lists_near_misses() {
    let trials = target_trials(&[(50.0, 0.1), (60.0, 0.2), (40.0, 0.0), (55.0, 0.3)]);
    match select_best(&trials, &SelectionCriteria::fair("a", 70.0)) {
        Err(HarnessError::NoQualifyingTrial { near_misses, .. }) => {
            let idx: Vec<usize> = near_misses.iter().map(|m| m.index).collect();
            assert_eq!(idx, vec![1, 3, 0]);
        }
        other => panic!("expected NoQualifyingTrial, got {other:?}"),
    }
}

#[test]
fn failed_trials_are_skipped() {
    let mut trials = target_trials(&[(90.0, 0.0), (70.0, 1.0)]);
    trials[0].status = TrialStatus::Failed;
    let s = select_best(&trials, &SelectionCriteria::performance("a")).unwrap();
    assert_eq!(s.record.index, 1);
}

#[test]
fn auxiliary_rule_ranks_by_auxiliary_fairness_only() {
    // Target ε would pick trial 0; auxiliary ε picks trial 1.
    let trials = vec![
        trial(0, &[("a", 70.0, Some(0.1)), ("b", 60.0, Some(0.9))]),
        trial(1, &[("a", 69.0, Some(2.0)), ("b", 60.0, Some(0.2))]),
        trial(2, &[("a", 50.0, Some(0.0)), ("b", 60.0, Some(0.0))]),
    ];
    let c = SelectionCriteria::fair_without_demographics("a", "b", 70.0);
    let s = select_best(&trials, &c).unwrap();
    assert_eq!(s.record.index, 1);
    assert_eq!(s.reads, vec!["dev.a.macro_f1", "dev.b.epsilon_deo"]);

    let with = select_best(&trials, &SelectionCriteria::fair("a", 70.0)).unwrap();
    assert_eq!(with.record.index, 0);
    assert!(with.reads.contains(&"dev.a.epsilon_deo".to_string()));
}

#[test]
fn auxiliary_rule_is_blind_to_target_fairness_values() {
    let mut trials = vec![
        trial(0, &[("a", 70.0, Some(0.1)), ("b", 60.0, Some(0.9))]),
        trial(1, &[("a", 69.0, Some(2.0)), ("b", 60.0, Some(0.2))]),
    ];
    let c = SelectionCriteria::fair_without_demographics("a", "b", 70.0);
    let first = select_best(&trials, &c).unwrap();
    for t in &mut trials {
        let r = t.dev.get_mut("a").unwrap();
        r.epsilon_deo = Some(f64::NAN);
        r.epsilon_df = None;
    }
    let second = select_best(&trials, &c).unwrap();
    assert_eq!(first.record.index, second.record.index);
    assert_eq!(first.reads, second.reads);
}

#[test]
fn selection_config_is_validated() {
    let mut c = SelectionCriteria::fair("a", 70.0);
    c.threshold = 0.0;
    assert!(select_best(&target_trials(&[(70.0, 1.0)]), &c).is_err());
    let mut c = SelectionCriteria::performance("a");
    c.mode = SelectionMode::FairWithDemographics;
    assert!(c.validate().is_err());
}

#[test]
fn report_has_one_row_per_method() {
    let mut t0 = trial(0, &[]);
    t0.test.insert("a".into(), report("a", 81.0, Some(1.5)));
    let mut t1 = trial(1, &[]);
    t1.test.insert("a".into(), report("a", 80.0, Some(f64::INFINITY)));
    let table = emit_report(&[("stl-base", &t0), ("mtl-fair", &t1)], "a", &ReportOptions::default());
    assert_eq!(table.columns, vec!["method", "macro_f1", "epsilon_deo"]);
    assert_eq!(table.rows.len(), 2);
    let tsv = table.to_tsv();
    assert_eq!(tsv.lines().count(), 3);
    assert!(tsv.contains("mtl-fair\t80.0000\tinf"));
}

#[test]
fn intersectional_report_adds_group_columns() {
    let mut t0 = trial(0, &[]);
    let mut r = report("a", 81.0, Some(1.5));
    r.per_group = ["f/u35", "f/o45", "m/u35", "m/o45"]
        .iter()
        .enumerate()
        .map(|(i, g)| GroupReport {
            group: g.to_string(),
            support: 10,
            macro_f1: 70.0 + i as f64,
        })
        .collect();
    t0.test.insert("a".into(), r);
    let opts = ReportOptions {
        per_group: true,
        ..ReportOptions::default()
    };
    let table = emit_report(&[("mtl-inter", &t0)], "a", &opts);
    assert_eq!(table.columns.len(), 3 + 4);
    assert_eq!(table.columns[3], "f1[f/u35]");
    assert_eq!(table.value("mtl-inter", "f1[m/o45]"), Some(73.0));
}

#[test]
fn tsv_and_json_hold_identical_values() {
    let mut table = ReportTable::new(&["macro_f1", "epsilon_deo"]);
    table.push("x", vec![Some(81.123456), Some(f64::INFINITY)]);
    table.push("y", vec![None, Some(0.333333333)]);
    let json: serde_json::Value = serde_json::from_str(&table.to_json()).unwrap();
    let tsv = table.to_tsv();
    for (row, line) in json["rows"].as_array().unwrap().iter().zip(tsv.lines().skip(1)) {
        let cells: Vec<&str> = line.split('\t').collect();
        for (j, v) in row.as_array().unwrap().iter().enumerate() {
            match v {
                serde_json::Value::String(s) => assert_eq!(s, cells[j]),
                serde_json::Value::Null => assert_eq!(cells[j], "NA"),
                n => assert_eq!(n.as_f64().unwrap(), cells[j].parse::<f64>().unwrap()),
            }
        }
    }
}

#[test]
fn frontier_marks_undominated_trials() {
    let trials = target_trials(&[(70.0, 1.0), (68.0, 0.5), (65.0, 0.8)]);
    let csv = frontier_csv(&[("m", &trials)], "a");
    let flags: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(flags, vec!["1", "1", "0"]);
}

#[test]
fn grid_runs_trials_and_records_failures() {
    let base = tiny_base(TaskSelection::single("a"));
    let data = load_data(&base.data, &base.tasks).unwrap();
    let mut g = GridSpec::new(Variant::StlBase);
    g.learning_rate = vec![0.0, 1e-2];
    g.batch_size = vec![32];
    let recs = grid_search(&g, &base, &data, &GridOptions::default()).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].status, TrialStatus::Failed);
    assert!(recs[0].error.as_deref().unwrap().contains("learning_rate"));
    assert!(recs[1].completed());
    assert!(recs[1].dev.contains_key("a") && recs[1].test.contains_key("a"));
}

#[test]
fn grid_resumes_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_base(TaskSelection::pair("a", "b"));
    let data = load_data(&base.data, &base.tasks).unwrap();
    let mut g = GridSpec::new(Variant::MtlBase);
    g.learning_rate = vec![1e-2];
    g.batch_size = vec![32];
    g.seeds = vec![0, 1];
    let opts = GridOptions {
        workers: 2,
        out_dir: Some(dir.path().to_path_buf()),
        save_checkpoints: true,
    };
    let first = grid_search(&g, &base, &data, &opts).unwrap();
    assert_eq!(first.len(), 2);
    // Same point, two seeds: only the seed and the metrics differ.
    assert_eq!(
        TrialPoint {
            seed: 0,
            ..first[1].point
        },
        first[0].point
    );
    assert_ne!(first[0].dev, first[1].dev);
    let ckpt = dir.path().join(first[0].checkpoint.as_ref().unwrap());
    assert!(ckpt.exists());
    assert!(ckpt.with_file_name("config.json").exists());

    g.learning_rate.push(5e-3);
    let second = grid_search(&g, &base, &data, &opts).unwrap();
    assert_eq!(second.len(), 4);
    // Reused trials carry their original wall-clock time.
    let reused: Vec<&TrialRecord> = second.iter().filter(|r| r.point.learning_rate == 1e-2).collect();
    assert_eq!(reused.len(), 2);
    for r in reused {
        let orig = first.iter().find(|f| f.hash == r.hash).unwrap();
        assert_eq!(r.wall_clock_secs, orig.wall_clock_secs);
        assert_eq!(r.dev, orig.dev);
    }
    let manifest = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.trials.len(), 4);
}

#[test]
fn rerun_trial_config_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_base(TaskSelection::pair("a", "b"));
    let data = load_data(&base.data, &base.tasks).unwrap();
    let mut g = GridSpec::new(Variant::MtlFair);
    g.learning_rate = vec![1e-2];
    g.batch_size = vec![32];
    g.lambda = vec![1.0];
    g.rho = vec![0.1];
    g.burn_in = vec![0.5];
    let opts = GridOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..GridOptions::default()
    };
    let rec = grid_search(&g, &base, &data, &opts).unwrap().remove(0);
    let ckpt = dir.path().join(rec.checkpoint.as_ref().unwrap());
    let text = std::fs::read_to_string(ckpt.with_file_name("config.json")).unwrap();
    let cfg: TrialConfig = serde_json::from_str(&text).unwrap();
    let again = run_trial(&cfg, &load_data(&cfg.data, &cfg.tasks).unwrap()).unwrap();
    assert_eq!(again.dev, rec.dev);
    assert_eq!(again.model.to_json().unwrap(), std::fs::read_to_string(&ckpt).unwrap());
}

#[test]
fn stilt_and_frozen_trials_run() {
    let base = tiny_base(TaskSelection::pair("a", "b"));
    let data = load_data(&base.data, &base.tasks).unwrap();
    let mut g = GridSpec::new(Variant::MtlFair);
    g.pipeline = Pipeline::Stilt;
    g.freeze_encoder = true;
    g.learning_rate = vec![1e-2];
    g.batch_size = vec![32];
    g.lambda = vec![1.0];
    g.rho = vec![0.1];
    g.burn_in = vec![0.0];
    let cfg = g.points()[0].config(&base);
    let out = run_trial(&cfg, &data).unwrap();
    assert_eq!(out.history.phases.len(), 2);
    assert!(out.dev.contains_key("a") && out.dev.contains_key("b"));

    let base = tiny_base(TaskSelection::single("a"));
    let data = load_data(&base.data, &base.tasks).unwrap();
    let mut g = GridSpec::new(Variant::StlBase);
    g.freeze_encoder = true;
    let cfg = g.points()[0].config(&base);
    let out = run_trial(&cfg, &data).unwrap();
    let fresh = crate::model::init_model(
        &cfg.model.encoder(&data).unwrap(),
        &[data[0].train.spec.clone()],
        cfg.train.seed,
    )
    .unwrap();
    let enc = out.model.component_ids(ENCODER).unwrap();
    for id in enc {
        assert_eq!(out.model.tensor(id).value, fresh.tensor(id).value);
    }
}

#[test]
fn data_task_mismatch_is_a_config_error() {
    let base = tiny_base(TaskSelection::pair("a", "b"));
    let data = load_data(&base.data, &TaskSelection::single("a")).unwrap();
    let cfg = GridSpec::new(Variant::MtlBase).points()[0].config(&base);
    assert!(matches!(run_trial(&cfg, &data), Err(HarnessError::Config(_))));
}

#[test]
fn oracle_target_keeps_generator_groups() {
    let mut sel = TaskSelection::single("a");
    let plain = load_data(&DataSource::Synthetic(tiny_bias(2)), &sel).unwrap();
    assert_eq!(plain[0].train.grouped_count(), 0);
    sel.oracle_target = true;
    let oracle = load_data(&DataSource::Synthetic(tiny_bias(2)), &sel).unwrap();
    assert_eq!(oracle[0].train.grouped_count(), oracle[0].train.len());
    assert_eq!(oracle[0].dev, plain[0].dev);
}

#[test]
fn directory_source_matches_in_memory_data() {
    let dir = tempfile::tempdir().unwrap();
    let pair = crate::data::synthesize(&tiny_bias(3)).unwrap();
    crate::data::write_synthetic_dir(dir.path(), &pair).unwrap();
    let sel = TaskSelection::pair("a", "b");
    let mem = load_data(&DataSource::Synthetic(tiny_bias(3)), &sel).unwrap();
    let disk = load_data(&DataSource::Directory(dir.path().to_path_buf()), &sel).unwrap();
    assert_eq!(mem.len(), disk.len());
    for (m, d) in mem.iter().zip(&disk) {
        assert_eq!(m.train.spec, d.train.spec);
        assert_eq!(m.dev.len(), d.dev.len());
        assert_eq!(d.dev.split, Split::Dev);
        for (x, y) in m.train.examples.iter().zip(&d.train.examples) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.groups, y.groups);
            assert_eq!(x.features, y.features);
        }
    }
}
