use serde::{Deserialize, Serialize};

use super::{HarnessError, TrialRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Highest target dev macro-F1.
    Performance,
    /// Lowest target dev ε-DEO among trials that keep enough F1.
    FairWithDemographics,
    /// Lowest auxiliary dev ε-DEO among trials that keep enough F1; the
    /// target's fairness metrics are never read.
    FairNoDemographics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionCriteria {
    pub mode: SelectionMode,
    pub target: String,
    /// Task whose fairness ranks trials in `fair-no-demographics` mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auxiliary: Option<String>,
    /// Dev macro-F1 of the selected STL-base model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.95
}

impl SelectionCriteria {
    pub fn performance(target: &str) -> Self {
        Self {
            mode: SelectionMode::Performance,
            target: target.to_string(),
            auxiliary: None,
            reference: None,
            threshold: default_threshold(),
        }
    }

    pub fn fair(target: &str, reference: f64) -> Self {
        Self {
            mode: SelectionMode::FairWithDemographics,
            reference: Some(reference),
            ..Self::performance(target)
        }
    }

    pub fn fair_without_demographics(target: &str, auxiliary: &str, reference: f64) -> Self {
        Self {
            mode: SelectionMode::FairNoDemographics,
            auxiliary: Some(auxiliary.to_string()),
            ..Self::fair(target, reference)
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad("selection threshold must lie in (0, 1]");
        }
        if self.mode != SelectionMode::Performance && self.reference.is_none() {
            return bad("fair selection modes need a reference F1");
        }
        if self.mode == SelectionMode::FairNoDemographics && self.auxiliary.is_none() {
            return bad("fair-no-demographics selection needs an auxiliary task");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearMiss {
    pub index: usize,
    pub macro_f1: f64,
}

/// The chosen trial and every dev metric read while choosing it, as
/// `dev.<task>.<metric>` keys in first-read order.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub record: TrialRecord,
    pub reads: Vec<String>,
}

/// Metric access that logs what it touches.
struct Reader<'a> {
    trials: &'a [TrialRecord],
    reads: Vec<String>,
}

impl Reader<'_> {
    fn note(&mut self, task: &str, metric: &str) {
        let key = format!("dev.{task}.{metric}");
        if !self.reads.contains(&key) {
            self.reads.push(key);
        }
    }

    fn macro_f1(&mut self, i: usize, task: &str) -> Option<f64> {
        self.note(task, "macro_f1");
        self.trials[i].dev.get(task).map(|r| r.macro_f1)
    }

    /// A missing ε ranks last.
    fn epsilon_deo(&mut self, i: usize, task: &str) -> f64 {
        self.note(task, "epsilon_deo");
        self.trials[i]
            .dev
            .get(task)
            .and_then(|r| r.epsilon_deo)
            .unwrap_or(f64::INFINITY)
    }
}

/// Picks one trial per the criteria. Ties go to the higher F1, then to the
/// lower trial index. Failed trials and trials without a target dev report
/// are ignored.
pub fn select_best(trials: &[TrialRecord], criteria: &SelectionCriteria) -> Result<Selection, HarnessError> {
    criteria.validate()?;
    let mut reader = Reader {
        trials,
        reads: Vec::new(),
    };
    let target = criteria.target.as_str();
    let scored: Vec<(usize, f64)> = (0..trials.len())
        .filter(|&i| trials[i].completed())
        .filter_map(|i| reader.macro_f1(i, target).map(|f| (i, f)))
        .collect();
    if scored.is_empty() {
        return Err(HarnessError::Config(format!(
            "no completed trial has a dev report for `{target}`"
        )));
    }
    let by_f1 =
        |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(trials[a.0].index.cmp(&trials[b.0].index));

    let chosen = match criteria.mode {
        SelectionMode::Performance => scored.iter().copied().min_by(by_f1).expect("non-empty").0,
        mode => {
            let reference = criteria.reference.expect("validated");
            let cut = criteria.threshold * reference;
            let qualified: Vec<(usize, f64)> = scored.iter().copied().filter(|&(_, f)| f >= cut).collect();
            if qualified.is_empty() {
                let mut near = scored.clone();
                near.sort_by(by_f1);
                return Err(HarnessError::NoQualifyingTrial {
                    task: target.to_string(),
                    reference,
                    threshold: criteria.threshold,
                    near_misses: near
                        .into_iter()
                        .take(3)
                        .map(|(i, f)| NearMiss {
                            index: trials[i].index,
                            macro_f1: f,
                        })
                        .collect(),
                });
            }
            let fairness_task = match mode {
                SelectionMode::FairWithDemographics => target,
                _ => criteria.auxiliary.as_deref().expect("validated"),
            };
            let ranked: Vec<(usize, f64, f64)> = qualified
                .into_iter()
                .map(|(i, f)| (i, f, reader.epsilon_deo(i, fairness_task)))
                .collect();
            ranked
                .into_iter()
                .min_by(|a, b| a.2.total_cmp(&b.2).then_with(|| by_f1(&(a.0, a.1), &(b.0, b.1))))
                .map(|(i, _, _)| i)
                .expect("non-empty")
        }
    };
    Ok(Selection {
        record: trials[chosen].clone(),
        reads: reader.reads,
    })
}
