use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Example, Label};
use crate::diffmath::{forward, Expr};
use crate::eval::{decide, f1_summary, hard_fairness, predict_probabilities};
use crate::fairness::SmoothedCounts;
use crate::model::ModelParams;
use crate::objectives::{build_objective, Batch, ObjectiveSpec, Progress};

use super::adam::{check_finite, clip_gradients, global_norm};
use super::schedule::sample_index;
use super::{
    adam_step, dynamic_schedule, AdamState, DevMetrics, EvalRecord, PhaseRecord, Scheduler, StepRecord, TaskData,
    TrainConfig, TrainError, TrainHistory,
};

const CHECKPOINT_FORMAT: &str = "fairtransfer-trainer/1";

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerCheckpoint {
    pub format: String,
    pub phase: String,
    pub step_offset: u64,
    /// Steps completed within this phase.
    pub step: u64,
    pub model: ModelParams,
    pub adam: AdamState,
    pub smoothed: BTreeMap<String, SmoothedCounts>,
    pub history: TrainHistory,
    scheduler: SchedulerState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SchedulerState {
    probabilities: Vec<f64>,
    /// Word position of the task-sampling stream, as a decimal string.
    word_pos: String,
    /// Per task: refill count and position in the current batch list.
    refills: Vec<u64>,
    cursors: Vec<usize>,
}

pub fn load_checkpoint(path: &Path) -> Result<TrainerCheckpoint, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    let cp: TrainerCheckpoint = serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    if cp.format != CHECKPOINT_FORMAT {
        return Err(TrainError::Checkpoint(format!("unsupported format `{}`", cp.format)));
    }
    Ok(cp)
}

/// Trains one objective over one task (STL variants) or two tasks (MTL
/// variants). Returns the final parameters; no early stopping is applied.
pub fn train(
    objective: &ObjectiveSpec,
    tasks: &[TaskData<'_>],
    model: ModelParams,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    let phase = objective.variant.as_str();
    train_phase(objective, tasks, model, config, phase, 0)
}

/// Continues a run from a checkpoint written by [`train`] with the same
/// objective, data, and config. The result is bit-identical to an
/// uninterrupted run.
pub fn resume(
    objective: &ObjectiveSpec,
    tasks: &[TaskData<'_>],
    config: &TrainConfig,
    checkpoint: TrainerCheckpoint,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    let mut trainer = Trainer::new(
        objective,
        tasks,
        checkpoint.model.clone(),
        config,
        &checkpoint.phase,
        checkpoint.step_offset,
    )?;
    trainer.restore(checkpoint)?;
    trainer.run()
}

pub(crate) fn train_phase(
    objective: &ObjectiveSpec,
    tasks: &[TaskData<'_>],
    model: ModelParams,
    config: &TrainConfig,
    phase: &str,
    step_offset: u64,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    Trainer::new(objective, tasks, model, config, phase, step_offset)?.run()
}

struct Trainer<'a> {
    objective: &'a ObjectiveSpec,
    tasks: Vec<TaskData<'a>>,
    names: Vec<String>,
    config: &'a TrainConfig,
    phase: String,
    step_offset: u64,
    model: ModelParams,
    adam: AdamState,
    smoothed: BTreeMap<String, SmoothedCounts>,
    history: TrainHistory,
    step: u64,
    total_steps: u64,
    steps_per_epoch: u64,
    sched: SchedulerState,
    sched_rng: ChaCha8Rng,
    /// Cached batch lists per task, keyed by refill index.
    batches: Vec<(u64, Vec<Vec<usize>>)>,
}

impl<'a> Trainer<'a> {
    fn new(
        objective: &'a ObjectiveSpec,
        tasks: &[TaskData<'a>],
        model: ModelParams,
        config: &'a TrainConfig,
        phase: &str,
        step_offset: u64,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let names: Vec<String> = tasks.iter().map(|t| t.train.spec.name.clone()).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        objective.validate(&name_refs)?;
        for t in tasks {
            let name = &t.train.spec.name;
            if model.head(name).is_none() {
                return Err(TrainError::Config(format!("model has no head for `{name}`")));
            }
            if t.train.is_empty() {
                return Err(TrainError::Config(format!("task `{name}` has no training data")));
            }
        }
        let mut smoothed = BTreeMap::new();
        for (name, cfg) in &objective.fairness {
            let t = tasks.iter().find(|t| &t.train.spec.name == name).expect("validated");
            if t.train.grouped_count() == 0 {
                return Err(TrainError::Config(format!(
                    "fairness target `{name}` has no group-annotated training examples"
                )));
            }
            let spec = &t.train.spec;
            smoothed.insert(
                name.clone(),
                SmoothedCounts::new(spec.kind, spec.schema.group_count(), cfg.rho),
            );
        }
        let n_batches: Vec<u64> = tasks
            .iter()
            .map(|t| t.train.len().div_ceil(config.batch_size) as u64)
            .collect();
        let dynamic = tasks.len() > 1 && config.scheduler == Scheduler::Dynamic;
        let steps_per_epoch = if dynamic {
            n_batches.iter().sum()
        } else {
            n_batches.iter().copied().max().unwrap_or(0)
        };
        let mut sched_rng = ChaCha8Rng::seed_from_u64(config.seed);
        sched_rng.set_stream(u64::MAX);
        let k = tasks.len();
        Ok(Self {
            objective,
            tasks: tasks.to_vec(),
            names,
            config,
            phase: phase.to_string(),
            step_offset,
            adam: AdamState::new(&model),
            model,
            smoothed,
            history: TrainHistory::default(),
            step: 0,
            total_steps: steps_per_epoch * config.epochs as u64,
            steps_per_epoch,
            sched: SchedulerState {
                probabilities: vec![1.0 / k as f64; k],
                word_pos: "0".into(),
                refills: vec![0; k],
                cursors: vec![0; k],
            },
            sched_rng,
            batches: vec![(u64::MAX, Vec::new()); k],
        })
    }

    fn dynamic(&self) -> bool {
        self.tasks.len() > 1 && self.config.scheduler == Scheduler::Dynamic
    }

    fn restore(&mut self, cp: TrainerCheckpoint) -> Result<(), TrainError> {
        if cp.model.tensors().len() != self.model.tensors().len() {
            return Err(TrainError::Checkpoint("model layout differs".into()));
        }
        let word_pos: u128 = cp
            .scheduler
            .word_pos
            .parse()
            .map_err(|_| TrainError::Checkpoint("bad scheduler position".into()))?;
        self.sched_rng.set_word_pos(word_pos);
        self.model = cp.model;
        self.adam = cp.adam;
        self.smoothed = cp.smoothed;
        self.history = cp.history;
        self.step = cp.step;
        self.sched = cp.scheduler;
        Ok(())
    }

    fn batch_seed(&self, task: usize) -> u64 {
        self.config
            .seed
            .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(task as u64 + 1))
    }

    fn batch_list(&mut self, task: usize, refill: u64) -> &[Vec<usize>] {
        if self.batches[task].0 != refill {
            let list = make_batches(
                self.tasks[task].train,
                self.config.batch_size,
                self.batch_seed(task),
                refill,
                self.config.batch_mode,
            );
            self.batches[task] = (refill, list);
        }
        &self.batches[task].1
    }

    /// Batch index lists used by step `self.step`, per task index.
    fn plan_step(&mut self) -> Vec<(usize, Vec<usize>)> {
        if self.dynamic() {
            let u: f64 = self.sched_rng.random();
            let task = sample_index(&self.sched.probabilities, u);
            let refill = self.sched.refills[task];
            let cursor = self.sched.cursors[task];
            let list = self.batch_list(task, refill);
            let batch = list[cursor].clone();
            let len = list.len();
            if cursor + 1 == len {
                self.sched.refills[task] += 1;
                self.sched.cursors[task] = 0;
            } else {
                self.sched.cursors[task] += 1;
            }
            vec![(task, batch)]
        } else {
            let epoch = self.step / self.steps_per_epoch;
            let within = (self.step % self.steps_per_epoch) as usize;
            (0..self.tasks.len())
                .map(|t| {
                    let list = self.batch_list(t, epoch);
                    (t, list[within % list.len()].clone())
                })
                .collect()
        }
    }

    fn epoch(&self) -> usize {
        self.step.checked_div(self.steps_per_epoch).unwrap_or(0) as usize
    }

    fn run(mut self) -> Result<(ModelParams, TrainHistory), TrainError> {
        if self.history.phases.last().map(|p| &p.name) != Some(&self.phase) {
            self.history.phases.push(PhaseRecord {
                name: self.phase.clone(),
                variant: self.objective.variant,
                start_step: self.step_offset,
                end_step: self.step_offset,
            });
        }
        while self.step < self.total_steps {
            self.train_step()?;
            self.step += 1;
            let at_epoch_end = self.step.is_multiple_of(self.steps_per_epoch);
            let due = if self.config.eval_every == 0 {
                at_epoch_end
            } else {
                self.step.is_multiple_of(self.config.eval_every) || self.step == self.total_steps
            };
            if due {
                self.evaluate()?;
            }
            self.history.phases.last_mut().expect("pushed").end_step = self.step_offset + self.step;
            if self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every) {
                self.write_checkpoint()?;
            }
        }
        Ok((self.model, self.history))
    }

    fn train_step(&mut self) -> Result<(), TrainError> {
        let global_step = self.step_offset + self.step;
        let plan = self.plan_step();
        let batches: Vec<Batch<'a>> = plan
            .iter()
            .map(|(t, idx)| {
                let ds = self.tasks[*t].train;
                Batch {
                    task: &ds.spec,
                    examples: idx.iter().map(|&i| &ds.examples[i]).collect(),
                }
            })
            .collect();
        let progress = Progress {
            step: self.step,
            total_steps: self.total_steps,
        };
        let objective = build_objective(&batches, &self.model, self.objective, &self.smoothed, progress)?;

        let mut roots: Vec<&Expr> = vec![&objective.total];
        roots.extend(objective.task_losses.iter().map(|(_, l)| l));
        for p in &objective.penalties {
            roots.push(&p.penalty);
            if let Some(e) = &p.epsilon {
                roots.push(e);
            }
            if let Some(s) = &p.smoothed {
                roots.extend(s.slots.iter());
            }
        }
        let math = |source| TrainError::Math {
            step: global_step,
            source,
        };
        let pass = forward(&roots, &self.model).map_err(math)?;
        let mut grads = pass.backward(&objective.total).map_err(math)?;

        let mut record = StepRecord {
            step: global_step,
            epoch: self.epoch(),
            phase: self.phase.clone(),
            tasks: plan.iter().map(|(t, _)| self.names[*t].clone()).collect(),
            losses: BTreeMap::new(),
            penalties: BTreeMap::new(),
            soft_epsilon: BTreeMap::new(),
            skipped_penalty: Vec::new(),
            grad_norm: 0.0,
        };
        for (name, loss) in &objective.task_losses {
            record.losses.insert(name.clone(), pass.scalar(loss).expect("in pass"));
        }
        for p in &objective.penalties {
            record
                .penalties
                .insert(p.task.clone(), pass.scalar(&p.penalty).expect("in pass"));
            match (&p.epsilon, &p.smoothed) {
                (Some(eps), Some(blended)) => {
                    record
                        .soft_epsilon
                        .insert(p.task.clone(), pass.scalar(eps).expect("in pass"));
                    let values: Vec<_> = blended.slots.iter().map(|s| pass.value(s).expect("in pass")).collect();
                    self.smoothed
                        .get_mut(&p.task)
                        .expect("state per penalized task")
                        .commit(&values)?;
                }
                _ => record.skipped_penalty.push(p.task.clone()),
            }
        }
        if !record.skipped_penalty.is_empty() {
            self.history.skipped_penalty_steps += 1;
        }

        check_finite(&self.model, &grads, global_step)?;
        record.grad_norm = match self.config.grad_clip {
            Some(c) => clip_gradients(&self.model, &mut grads, c),
            None => global_norm(&self.model, &grads),
        };
        adam_step(
            &mut self.model,
            &grads,
            &mut self.adam,
            self.config.learning_rate,
            &self.config.adam,
        )?;
        self.history.steps.push(record);
        Ok(())
    }

    fn evaluate(&mut self) -> Result<(), TrainError> {
        let mut dev = BTreeMap::new();
        for t in &self.tasks {
            let Some(ds) = t.dev else { continue };
            let examples: Vec<&Example> = ds.examples.iter().collect();
            let probs = predict_probabilities(&self.model, &ds.spec.name, &examples)?;
            let predicted: Vec<Label> = probs.iter().map(|p| decide(ds.spec.kind, p)).collect();
            let truth: Vec<Label> = ds.examples.iter().map(|e| e.label.clone()).collect();
            let groups: Vec<_> = ds.examples.iter().map(|e| e.groups.clone()).collect();
            let f1 = f1_summary(&predicted, &truth, ds.spec.kind).macro_f1;
            let epsilon_deo =
                (ds.grouped_count() > 0).then(|| hard_fairness(&ds.spec, &predicted, &truth, &groups, 1.0).0);
            dev.insert(
                ds.spec.name.clone(),
                DevMetrics {
                    macro_f1: f1,
                    epsilon_deo,
                },
            );
        }
        if self.dynamic() && self.names.iter().all(|n| dev.contains_key(n)) {
            let scores: Vec<f64> = self.names.iter().map(|n| dev[n].macro_f1 / 100.0).collect();
            self.sched.probabilities = dynamic_schedule(&scores, self.config.gamma_min);
        }
        let schedule = self
            .names
            .iter()
            .cloned()
            .zip(self.sched.probabilities.iter().copied())
            .collect();
        self.history.evals.push(EvalRecord {
            step: self.step_offset + self.step,
            epoch: self.epoch(),
            phase: self.phase.clone(),
            dev,
            schedule,
        });
        Ok(())
    }

    fn write_checkpoint(&mut self) -> Result<(), TrainError> {
        let dir = self.config.checkpoint_dir.as_ref().expect("validated");
        self.sched.word_pos = self.sched_rng.get_word_pos().to_string();
        let cp = TrainerCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            phase: self.phase.clone(),
            step_offset: self.step_offset,
            step: self.step,
            model: self.model.clone(),
            adam: self.adam.clone(),
            smoothed: self.smoothed.clone(),
            history: self.history.clone(),
            scheduler: self.sched.clone(),
        };
        std::fs::create_dir_all(dir).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", dir.display())))?;
        let path = dir.join(format!("{}-step{:08}.json", self.phase, self.step));
        let text = serde_json::to_string(&cp).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))
    }
}
