use std::path::{Path, PathBuf};

use fairtransfer::benchmark::{
    run_intersectional_benchmark, run_stilt_comparison, run_transfer_benchmark, RunOptions, SuiteOutcome,
};
use fairtransfer::data::{synthesize, write_synthetic_dir};
use fairtransfer::eval::EvalReport;
use fairtransfer::harness::{
    emit_report, frontier_csv, grid_search, lambda_csv, load_data, run_trial, select_best, GridOptions, Manifest,
    ReportOptions, SelectionCriteria, SelectionMode, TrialRecord, MANIFEST_FILE,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;

pub const SELECTION_FILE: &str = "selection.json";

/// Settings every command shares.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub workers: usize,
    pub dry_run: bool,
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("value serializes"));
}

/// Writes the synthetic task pair as JSONL files plus a manifest.
pub fn synth(ctx: &Context) -> Result<(), CliError> {
    let spec = &ctx.config.synth;
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if ctx.dry_run {
        print_json(&json!({ "command": "synth", "out": ctx.out, "synth": spec }));
        return Ok(());
    }
    let pair = synthesize(spec)?;
    let manifest = write_synthetic_dir(&ctx.out, &pair)?;
    let files: usize = manifest.tasks.values().map(|s| s.len()).sum();
    print_json(&json!({ "command": "synth", "out": ctx.out, "files": files }));
    Ok(())
}

fn report_files(
    dir: &Path,
    split: &str,
    reports: &std::collections::BTreeMap<String, EvalReport>,
) -> Result<(), CliError> {
    let mut tsv = EvalReport::tsv_header() + "\n";
    for r in reports.values() {
        tsv.push_str(&r.tsv_row());
        tsv.push('\n');
    }
    write(&dir.join(format!("{split}.tsv")), tsv)?;
    write(&dir.join(format!("{split}.json")), pretty(reports))
}

/// Trains one configuration and writes the model, its history and the dev
/// and test reports.
pub fn train(ctx: &Context) -> Result<(), CliError> {
    let trial = ctx.config.trial();
    trial.validate()?;
    if ctx.dry_run {
        print_json(&json!({ "command": "train", "out": ctx.out, "trial": trial }));
        return Ok(());
    }
    let data = load_data(&trial.data, &trial.tasks)?;
    let outcome = run_trial(&trial, &data)?;
    write(&ctx.out.join("config.json"), pretty(&trial))?;
    let model = outcome.model.to_json().map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&ctx.out.join("model.json"), model + "\n")?;
    write(&ctx.out.join("history.json"), pretty(&outcome.history))?;
    report_files(&ctx.out, "dev", &outcome.dev)?;
    report_files(&ctx.out, "test", &outcome.test)?;
    let summary: Vec<_> = outcome
        .test
        .values()
        .chain(outcome.dev.values().filter(|_| outcome.test.is_empty()))
        .map(|r| json!({ "task": r.task, "macro_f1": r.macro_f1, "epsilon_deo": r.epsilon_deo }))
        .collect();
    print_json(&json!({ "command": "train", "out": ctx.out, "results": summary }));
    Ok(())
}

/// Runs every trial of the grid, resuming completed ones from the manifest.
pub fn grid(ctx: &Context) -> Result<(), CliError> {
    let grid = &ctx.config.grid;
    let base = ctx.config.experiment();
    grid.validate()?;
    if ctx.dry_run {
        print_json(&json!({ "command": "grid", "out": ctx.out, "trials": grid.size() }));
        return Ok(());
    }
    let data = load_data(&base.data, &base.tasks)?;
    let options = GridOptions {
        workers: ctx.workers,
        out_dir: Some(ctx.out.clone()),
        save_checkpoints: true,
    };
    let records = grid_search(grid, &base, &data, &options)?;
    let completed = records.iter().filter(|r| r.completed()).count();
    print_json(&json!({
        "command": "grid",
        "manifest": ctx.out.join(MANIFEST_FILE),
        "trials": records.len(),
        "completed": completed,
        "failed": records.len() - completed,
    }));
    if completed == 0 {
        return Err(CliError::Runtime(format!("all {} trials failed", records.len())));
    }
    Ok(())
}

fn manifest_trials(path: &Path) -> Result<Vec<TrialRecord>, CliError> {
    let manifest = Manifest::load(path)?;
    let mut trials: Vec<TrialRecord> = manifest.trials.into_values().collect();
    trials.sort_by_key(|t| t.index);
    Ok(trials)
}

/// The file the `select` command writes and `report` reads.
#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionFile {
    pub criteria: SelectionCriteria,
    /// Dev metrics read while selecting, as `dev.<task>.<metric>`.
    pub reads: Vec<String>,
    pub record: TrialRecord,
}

/// Picks one trial of a grid manifest.
pub fn select(ctx: &Context) -> Result<(), CliError> {
    let s = &ctx.config.selection;
    let manifest = s.manifest.clone().unwrap_or_else(|| ctx.out.join(MANIFEST_FILE));
    let reference = match (s.mode, s.reference, &s.reference_manifest) {
        (SelectionMode::Performance, _, _) => 0.0,
        (_, Some(r), _) => r,
        (_, None, Some(path)) => {
            let base = select_best(&manifest_trials(path)?, &SelectionCriteria::performance(&s.target))?;
            base.record
                .dev
                .get(&s.target)
                .map(|r| r.macro_f1)
                .ok_or_else(|| CliError::Data(format!("{}: no dev report for `{}`", path.display(), s.target)))?
        }
        (_, None, None) => {
            return Err(CliError::Config(
                "fair selection needs `selection.reference` or `selection.reference_manifest`".into(),
            ))
        }
    };
    let mut criteria = match s.mode {
        SelectionMode::Performance => SelectionCriteria::performance(&s.target),
        SelectionMode::FairWithDemographics => SelectionCriteria::fair(&s.target, reference),
        SelectionMode::FairNoDemographics => {
            let aux = s
                .auxiliary
                .as_deref()
                .ok_or_else(|| CliError::Config("fair-no-demographics selection needs `selection.auxiliary`".into()))?;
            SelectionCriteria::fair_without_demographics(&s.target, aux, reference)
        }
    };
    criteria.threshold = s.threshold;
    criteria.validate()?;
    if ctx.dry_run {
        print_json(&json!({ "command": "select", "manifest": manifest, "criteria": criteria }));
        return Ok(());
    }
    let selection = select_best(&manifest_trials(&manifest)?, &criteria)?;
    let file = SelectionFile {
        criteria,
        reads: selection.reads,
        record: selection.record,
    };
    let path = ctx.out.join(SELECTION_FILE);
    write(&path, pretty(&file))?;
    print_json(&json!({
        "command": "select",
        "selection": path,
        "index": file.record.index,
        "hash": file.record.hash,
    }));
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

/// Builds the method comparison table and the plot series from selections.
pub fn report(ctx: &Context) -> Result<(), CliError> {
    let r = &ctx.config.report;
    if r.methods.is_empty() {
        return Err(CliError::Config("`report.methods` is empty".into()));
    }
    if ctx.dry_run {
        print_json(&json!({ "command": "report", "out": ctx.out, "report": r }));
        return Ok(());
    }
    let mut selected = Vec::new();
    let mut series = Vec::new();
    for m in &r.methods {
        let file: SelectionFile = read_json(&m.selection)?;
        selected.push((m.name.as_str(), file.record));
        if let Some(path) = &m.manifest {
            series.push((m.name.as_str(), manifest_trials(path)?));
        }
    }
    let rows: Vec<(&str, &TrialRecord)> = selected.iter().map(|(n, t)| (*n, t)).collect();
    let options = ReportOptions {
        split: r.split,
        per_group: r.per_group,
    };
    let table = emit_report(&rows, &r.target, &options);
    let series: Vec<(&str, &[TrialRecord])> = series.iter().map(|(n, t)| (*n, t.as_slice())).collect();
    write(&ctx.out.join("report.tsv"), table.to_tsv())?;
    write(&ctx.out.join("report.json"), table.to_json())?;
    write(&ctx.out.join("epsilon_vs_lambda.csv"), lambda_csv(&series, &r.target))?;
    write(&ctx.out.join("frontier.csv"), frontier_csv(&series, &r.target))?;
    print!("{}", table.to_tsv());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Transfer,
    Intersectional,
    Stilt,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Transfer => "transfer",
            Suite::Intersectional => "intersectional",
            Suite::Stilt => "stilt",
        }
    }
}

fn write_suite(dir: &Path, suite: &SuiteOutcome) -> Result<(), CliError> {
    write(&dir.join("verdict.json"), suite.to_json())?;
    write(&dir.join("report.tsv"), suite.main.report.to_tsv())?;
    write(&dir.join("report.json"), suite.main.report.to_json())?;
    write(&dir.join("per_seed.tsv"), suite.main.per_seed.to_tsv())?;
    write(&dir.join("per_seed.json"), suite.main.per_seed.to_json())?;
    for c in &suite.controls {
        write(&dir.join(format!("{}.report.tsv", c.case)), c.report.to_tsv())?;
    }
    Ok(())
}

/// Runs a pinned benchmark suite across seeds `0..seeds`. Fails with the
/// verdict exit code when an assertion fails.
pub fn benchmark(ctx: &Context, suite: Suite, seeds: u64) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..seeds).collect();
    if ctx.dry_run {
        print_json(&json!({ "command": "benchmark", "suite": suite.name(), "seeds": seeds }));
        return Ok(());
    }
    let options = RunOptions {
        workers: ctx.workers,
        out_dir: Some(ctx.out.clone()),
        save_checkpoints: false,
    };
    let outcome = match suite {
        Suite::Transfer => run_transfer_benchmark(&seeds, &options)?,
        Suite::Intersectional => run_intersectional_benchmark(&seeds, &options)?,
        Suite::Stilt => run_stilt_comparison(&seeds, &options)?,
    };
    write_suite(&ctx.out.join(suite.name()), &outcome)?;
    for line in outcome.verdict_lines() {
        println!("{line}");
    }
    print!("{}", outcome.main.report.to_tsv());
    if outcome.passed {
        Ok(())
    } else {
        Err(CliError::Verdict(format!(
            "benchmark `{}` failed its assertions",
            suite.name()
        )))
    }
}
