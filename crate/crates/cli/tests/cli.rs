use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: [&str; 8] = [
    "--set",
    "synth.splits.train=300",
    "--set",
    "synth.splits.dev=150",
    "--set",
    "synth.splits.test=150",
    "--set",
    "train.epochs=1",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairtransfer"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_small(dir: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend(SMALL);
    run(dir, &all)
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.lines().next().unwrap_or("null")).unwrap_or(Value::Null)
}

fn error_of(out: &Output) -> (i32, Value) {
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is one JSON error");
    (out.status.code().unwrap(), err["error"].clone())
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&read(path)).unwrap()
}

#[test]
fn synth_writes_six_files_and_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["d1", "d2"] {
        ok(&run_small(dir.path(), &["synth", "--out", out, "--seed", "3"]));
    }
    let names = [
        "a.train.jsonl",
        "a.dev.jsonl",
        "a.test.jsonl",
        "b.train.jsonl",
        "b.dev.jsonl",
        "b.test.jsonl",
        "manifest.json",
    ];
    for name in names {
        assert_eq!(
            read(dir.path().join("d1").join(name)),
            read(dir.path().join("d2").join(name)),
            "{name}"
        );
    }
    ok(&run_small(dir.path(), &["synth", "--out", "d3", "--seed", "4"]));
    assert_ne!(
        read(dir.path().join("d1/a.train.jsonl")),
        read(dir.path().join("d3/a.train.jsonl"))
    );
}

#[test]
fn synth_records_bias_override_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run_small(
        dir.path(),
        &["synth", "--out", "d", "--set", "synth.bias=0.25"],
    ));
    let m = json(dir.path().join("d/manifest.json"));
    assert_eq!(m["bias"]["bias"], 0.25);
    assert_eq!(m["tasks"]["a"]["train"]["examples"], 300);
}

#[test]
fn train_writes_artifacts_and_history_fields_follow_the_variant() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run_small(dir.path(), &["train", "--out", "base"]));
    for f in [
        "config.json",
        "model.json",
        "history.json",
        "dev.tsv",
        "dev.json",
        "test.tsv",
        "test.json",
    ] {
        assert!(dir.path().join("base").join(f).exists(), "{f}");
    }
    let base = json(dir.path().join("base/history.json"));
    let step = &base["steps"][0];
    assert!(step.get("penalties").is_none() && step.get("soft_epsilon").is_none());

    ok(&run_small(
        dir.path(),
        &[
            "train",
            "--out",
            "fair",
            "--set",
            "tasks.oracle_target=true",
            "--set",
            "objective.variant=stl-fair",
            "--set",
            r#"objective.fairness={"a": {"lambda": 1.0, "rho": 0.1, "burn_in": 0.0}}"#,
        ],
    ));
    let fair = json(dir.path().join("fair/history.json"));
    let steps = fair["steps"].as_array().unwrap();
    assert!(steps.iter().any(|s| s["penalties"]["a"].is_number()));
    assert!(steps.iter().any(|s| s["soft_epsilon"]["a"].is_number()));
    let test = json(dir.path().join("fair/test.json"));
    assert!(test["a"]["macro_f1"].is_number());
}

#[test]
fn training_twice_with_one_seed_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["r1", "r2"] {
        ok(&run_small(dir.path(), &["train", "--out", out, "--seed", "7"]));
    }
    for f in ["model.json", "history.json", "test.json", "test.tsv", "dev.json"] {
        assert_eq!(
            read(dir.path().join("r1").join(f)),
            read(dir.path().join("r2").join(f)),
            "{f}"
        );
    }
}

#[test]
fn dry_run_reports_grid_size_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(&run(dir.path(), &["grid", "--dry-run", "--out", "g"]));
    assert_eq!(v["trials"], 9);
    let v = ok(&run(
        dir.path(),
        &[
            "grid",
            "--dry-run",
            "--set",
            "grid.variant=stl-fair",
            "--set",
            "grid.seeds=[0,1]",
        ],
    ));
    assert_eq!(v["trials"], 2 * 3 * 3 * 3 * 3 * 2);
    assert!(!dir.path().join("g").exists());
}

#[test]
fn grid_select_report_flow_keeps_target_fairness_unread() {
    let dir = tempfile::tempdir().unwrap();
    let one_point = [
        "--set",
        "grid.learning_rate=[0.001]",
        "--set",
        "grid.batch_size=[32]",
        "--set",
        "grid.rho=[0.1]",
        "--set",
        "grid.burn_in=[0]",
    ];
    let mut base = vec!["grid", "--out", "base"];
    base.extend(one_point);
    ok(&run_small(dir.path(), &base));
    ok(&run(dir.path(), &["select", "--out", "base"]));

    let mut fair = vec![
        "grid",
        "--out",
        "fair",
        "--set",
        "tasks.auxiliary=b",
        "--set",
        "grid.variant=mtl-fair",
        "--set",
        "grid.lambda=[1,5]",
    ];
    fair.extend(one_point);
    let v = ok(&run_small(dir.path(), &fair));
    assert_eq!((v["trials"].as_u64(), v["completed"].as_u64()), (Some(2), Some(2)));
    ok(&run(
        dir.path(),
        &[
            "select",
            "--out",
            "fair",
            "--set",
            "selection.mode=fair-no-demographics",
            "--set",
            "selection.auxiliary=b",
            "--set",
            "selection.reference_manifest=base/manifest.json",
            "--set",
            "selection.threshold=0.5",
        ],
    ));
    let sel = json(dir.path().join("fair/selection.json"));
    let reads: Vec<&str> = sel["reads"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r.as_str().unwrap())
        .collect();
    assert!(reads.contains(&"dev.b.epsilon_deo"));
    assert!(!reads.iter().any(|r| r.starts_with("dev.a.epsilon")));

    std::fs::write(
        dir.path().join("report.json"),
        r#"{"report": {"methods": [
            {"name": "stl-base", "selection": "base/selection.json"},
            {"name": "mtl-fair", "selection": "fair/selection.json", "manifest": "fair/manifest.json"}
        ]}}"#,
    )
    .unwrap();
    ok(&run(dir.path(), &["report", "--config", "report.json", "--out", "rep"]));
    let tsv = read(dir.path().join("rep/report.tsv"));
    let rows: Vec<&str> = tsv.lines().collect();
    assert_eq!(rows[0], "method\tmacro_f1\tepsilon_deo");
    assert!(rows[1].starts_with("stl-base\t") && rows[2].starts_with("mtl-fair\t"));
    assert_eq!(read(dir.path().join("rep/epsilon_vs_lambda.csv")).lines().count(), 3);
    assert_eq!(read(dir.path().join("rep/frontier.csv")).lines().count(), 3);
    let table = json(dir.path().join("rep/report.json"));
    assert_eq!(table["rows"][1][0], "mtl-fair");
}

#[test]
fn rerunning_a_grid_resumes_every_trial() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "grid",
        "--out",
        "g",
        "--set",
        "grid.learning_rate=[0.001]",
        "--set",
        "grid.batch_size=[16,32]",
    ];
    ok(&run_small(dir.path(), &args));
    let first = json(dir.path().join("g/manifest.json"));
    ok(&run_small(dir.path(), &args));
    assert_eq!(first, json(dir.path().join("g/manifest.json")));
}

#[test]
fn usage_config_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = error_of(&run(dir.path(), &["train", "--bogus"]));
    assert_eq!((code, err["kind"].as_str()), (2, Some("usage")));
    let (code, err) = error_of(&run(dir.path(), &["train", "--set", "train.epochz=3"]));
    assert_eq!((code, err["kind"].as_str()), (2, Some("config")));
    assert!(err["message"].as_str().unwrap().contains("epochz"));
    let (code, _) = error_of(&run(dir.path(), &["train", "--set", "objective.variant=mtl-fair"]));
    assert_eq!(code, 2);
    let (code, err) = error_of(&run(dir.path(), &["train", "--set", "data.directory=missing"]));
    assert_eq!((code, err["kind"].as_str()), (3, Some("data")));
    assert!(err["message"].as_str().unwrap().contains("missing"));
    let (code, _) = error_of(&run(dir.path(), &["select", "--out", "nowhere"]));
    assert_eq!(code, 3);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"seed": 1, "train": {"epochs": 9}}"#).unwrap();
    let v = ok(&run(
        dir.path(),
        &[
            "train",
            "--dry-run",
            "--config",
            "c.json",
            "--seed",
            "5",
            "--set",
            "train.epochs=2",
        ],
    ));
    assert_eq!(v["trial"]["train"]["epochs"], 2);
    assert_eq!(v["trial"]["train"]["seed"], 5);
    assert_eq!(v["trial"]["data"]["synthetic"]["seed"], 5);
}

#[test]
fn benchmark_dry_run_lists_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(&run(
        dir.path(),
        &["benchmark", "transfer", "--seeds", "3", "--dry-run"],
    ));
    assert_eq!(v["seeds"], serde_json::json!([0, 1, 2]));
    let (code, _) = error_of(&run(dir.path(), &["benchmark", "nonsense"]));
    assert_eq!(code, 2);
}
