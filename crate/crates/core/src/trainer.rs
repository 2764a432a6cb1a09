//! Training loop: rollout, group filtering, advantages, surrogate gradient,
//! parameter update and per-step diagnostics.
//!
//! `π_old` is refreshed at the start of every step; `π_ref` is the initial
//! policy and never changes. Diagnostics are computed over all groups before
//! filtering.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::{compute_advantages, AdvantageConfig, AdvantageError, Estimator};
use crate::evalkit::{evaluate_policy, EvalError, DEFAULT_KS};
use crate::group::{
    classify_group, GroupClass, GroupError, RewardScale, RewardedGroup, TaskId, TaskSpec, Tier,
    Trajectory,
};
use crate::policy::{PolicyError, PolicyParams, StateKey};
use crate::seeding::{stream, Purpose};
use crate::surrogate::{policy_gradient, BatchItem, ObjectiveConfig, SurrogateError};
use crate::tasks::verify;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("could not build worker pool: {0}")]
    ThreadPool(String),
}

/// Which homogeneous groups are excluded from the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    #[default]
    None,
    /// Keep only mixed groups (DAPO dynamic sampling).
    DropHomogeneousAll,
    /// Drop all-correct groups, keep all-incorrect ones.
    DropHomogeneousCorrect,
}

impl FilterMode {
    pub fn keeps(self, class: GroupClass) -> bool {
        match (self, class) {
            (FilterMode::None, _) | (_, GroupClass::Mixed) => true,
            (FilterMode::DropHomogeneousAll, _) => false,
            (FilterMode::DropHomogeneousCorrect, GroupClass::HomogeneousIncorrect) => true,
            (FilterMode::DropHomogeneousCorrect, GroupClass::HomogeneousCorrect) => false,
        }
    }
}

/// Evaluation settings used by the periodic eval hook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub samples: usize,
    pub ks: Vec<usize>,
    pub temperature: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            samples: 256,
            ks: DEFAULT_KS.to_vec(),
            temperature: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Responses per task (G).
    pub group_size: usize,
    pub tasks_per_step: usize,
    pub epochs: usize,
    /// Step size on the tabular logits. LLM-scale runs use ~1e-6; tabular
    /// logits need a much larger step.
    pub lr: f64,
    pub inner_epochs: usize,
    pub filter: FilterMode,
    pub adv: AdvantageConfig<f64>,
    pub obj: ObjectiveConfig<f64>,
    pub seed: u64,
    /// Run the eval hook every this many steps; 0 disables it.
    pub eval_cadence: usize,
    pub eval: EvalSettings,
    /// Decay of the per-task running reward mean used by the value baseline.
    pub baseline_decay: f64,
    pub scale: RewardScale<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 8,
            tasks_per_step: 64,
            epochs: 20,
            lr: 0.5,
            inner_epochs: 1,
            filter: FilterMode::None,
            adv: AdvantageConfig::default(),
            obj: ObjectiveConfig::default(),
            seed: 0,
            eval_cadence: 0,
            eval: EvalSettings::default(),
            baseline_decay: 0.9,
            scale: RewardScale::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.tasks_per_step < 1 {
            return bad("tasks_per_step must be >= 1");
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return bad("lr must be a finite value > 0");
        }
        if self.inner_epochs < 1 {
            return bad("inner_epochs must be >= 1");
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad("baseline_decay must lie in [0, 1)");
        }
        self.adv.validate(&self.scale)?;
        self.obj.validate(self.adv.estimator)?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, suite_len: usize) -> usize {
        suite_len.div_ceil(self.tasks_per_step)
    }
}

/// Per-tier group counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TierCounts {
    pub tasks: usize,
    pub fully_solved: usize,
    pub fully_unsolved: usize,
    pub solved_at_least_once: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_advantage: f64,
    pub mean_entropy: f64,
    pub mean_response_len: f64,
    pub fully_solved: usize,
    pub fully_unsolved: usize,
    pub solved_at_least_once: usize,
    pub total_incorrect: usize,
    pub groups_kept: usize,
    pub groups_dropped: usize,
    /// Indexed by [`Tier::index`]; not part of `metrics.csv`.
    #[serde(skip)]
    pub tiers: [TierCounts; 3],
}

pub const METRICS_HEADER: &str = "step,mean_reward,mean_advantage,mean_entropy,mean_response_len,\
fully_solved,fully_unsolved,solved_at_least_once,total_incorrect,groups_kept,groups_dropped";

impl StepDiagnostics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.mean_reward,
            self.mean_advantage,
            self.mean_entropy,
            self.mean_response_len,
            self.fully_solved,
            self.fully_unsolved,
            self.solved_at_least_once,
            self.total_incorrect,
            self.groups_kept,
            self.groups_dropped
        )
    }

    pub fn tier(&self, tier: Tier) -> &TierCounts {
        &self.tiers[tier.index()]
    }
}

pub fn metrics_csv(trace: &[StepDiagnostics]) -> String {
    let mut out = String::with_capacity(64 * (trace.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for d in trace {
        out.push_str(&d.csv_row());
        out.push('\n');
    }
    out
}

/// Mutable training state. The trainer is the single writer of `policy`.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub policy: PolicyParams,
    pub reference: PolicyParams,
    pub step: usize,
    /// Running reward mean per task, for the value-baseline estimator.
    pub baselines: BTreeMap<TaskId, f64>,
}

impl TrainState {
    pub fn new(policy: PolicyParams) -> Self {
        TrainState {
            reference: policy.clone(),
            policy,
            step: 0,
            baselines: BTreeMap::new(),
        }
    }
}

/// Sample and verify G responses per task under the frozen `policy`.
///
/// Task `t` at step `s` draws from the stream derived from `(seed, s, t)`.
pub fn rollout_groups(
    policy: &PolicyParams,
    tasks: &[TaskSpec],
    group_size: usize,
    scale: &RewardScale<f64>,
    seed: u64,
    step: usize,
) -> Result<Vec<RewardedGroup<f64>>, TrainError> {
    tasks
        .par_iter()
        .map(|task| {
            let mut rng = stream(seed, Purpose::Rollout, &[step as u64, task.task_id as u64]);
            let trajectories = (0..group_size)
                .map(|_| {
                    let s = policy.sample_trajectory(task, &mut rng, 1.0)?;
                    let reward = verify(task, &s.tokens, scale);
                    Ok(Trajectory::new(s.tokens, s.logps, reward)?)
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            Ok(RewardedGroup::new(task.task_id, trajectories, scale)?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropCounts {
    pub homogeneous_correct: usize,
    pub homogeneous_incorrect: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.homogeneous_correct + self.homogeneous_incorrect
    }
}

/// Indices of the groups kept under `mode`, plus what was dropped.
pub fn filter_groups(
    groups: &[RewardedGroup<f64>],
    mode: FilterMode,
    scale: &RewardScale<f64>,
) -> (Vec<usize>, DropCounts) {
    let mut kept = Vec::with_capacity(groups.len());
    let mut dropped = DropCounts::default();
    for (i, g) in groups.iter().enumerate() {
        let class = classify_group(g, scale);
        if mode.keeps(class) {
            kept.push(i);
        } else if class == GroupClass::HomogeneousCorrect {
            dropped.homogeneous_correct += 1;
        } else {
            dropped.homogeneous_incorrect += 1;
        }
    }
    (kept, dropped)
}

/// Result of one step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub diagnostics: StepDiagnostics,
    pub groups: Vec<RewardedGroup<f64>>,
    pub advantages: Vec<Vec<f64>>,
}

fn diagnose(
    step: usize,
    tasks: &[TaskSpec],
    groups: &[RewardedGroup<f64>],
    advantages: &[Vec<f64>],
    snapshot: &PolicyParams,
    dropped: usize,
    scale: &RewardScale<f64>,
) -> StepDiagnostics {
    let mut responses = 0usize;
    let mut tokens = 0usize;
    let mut reward_sum = 0.0;
    let mut adv_sum = 0.0;
    let mut entropy_sum = 0.0;
    let mut d = StepDiagnostics {
        step,
        mean_reward: 0.0,
        mean_advantage: 0.0,
        mean_entropy: 0.0,
        mean_response_len: 0.0,
        fully_solved: 0,
        fully_unsolved: 0,
        solved_at_least_once: 0,
        total_incorrect: 0,
        groups_kept: groups.len() - dropped,
        groups_dropped: dropped,
        tiers: [TierCounts::default(); 3],
    };
    for ((task, group), advs) in tasks.iter().zip(groups).zip(advantages) {
        let tier = &mut d.tiers[task.tier.index()];
        tier.tasks += 1;
        match classify_group(group, scale) {
            GroupClass::HomogeneousCorrect => {
                d.fully_solved += 1;
                tier.fully_solved += 1;
            }
            GroupClass::HomogeneousIncorrect => {
                d.fully_unsolved += 1;
                tier.fully_unsolved += 1;
            }
            GroupClass::Mixed => {}
        }
        let correct = group.correct_count(scale);
        if correct > 0 {
            d.solved_at_least_once += 1;
            tier.solved_at_least_once += 1;
        }
        d.total_incorrect += group.size() - correct;
        for (traj, &a) in group.trajectories().iter().zip(advs) {
            responses += 1;
            reward_sum += traj.reward;
            adv_sum += a;
            for t in 0..traj.len() {
                entropy_sum += snapshot.entropy(&StateKey::new(task, &traj.tokens[..t]));
                tokens += 1;
            }
        }
    }
    if responses > 0 {
        d.mean_reward = reward_sum / responses as f64;
        d.mean_advantage = adv_sum / responses as f64;
        d.mean_response_len = tokens as f64 / responses as f64;
    }
    if tokens > 0 {
        d.mean_entropy = entropy_sum / tokens as f64;
    }
    d
}

/// One optimization step on `tasks`.
pub fn train_step(
    state: &mut TrainState,
    tasks: &[TaskSpec],
    cfg: &TrainConfig,
) -> Result<StepOutcome, TrainError> {
    let scale = cfg.scale;
    let old = state.policy.clone();
    let groups = rollout_groups(&old, tasks, cfg.group_size, &scale, cfg.seed, state.step)?;

    let mut advantages = Vec::with_capacity(groups.len());
    for g in &groups {
        let baseline = state
            .baselines
            .get(&g.task_id())
            .copied()
            .unwrap_or(scale.r_min());
        advantages.push(compute_advantages(g.rewards(), &cfg.adv, &scale, baseline)?.advantages);
    }
    if cfg.adv.estimator == Estimator::ValueBaseline {
        for g in &groups {
            let mean = g.rewards().iter().sum::<f64>() / g.size() as f64;
            let b = state.baselines.entry(g.task_id()).or_insert(scale.r_min());
            *b = cfg.baseline_decay * *b + (1.0 - cfg.baseline_decay) * mean;
        }
    }

    let (kept, dropped) = filter_groups(&groups, cfg.filter, &scale);
    let diagnostics = diagnose(
        state.step,
        tasks,
        &groups,
        &advantages,
        &old,
        dropped.total(),
        &scale,
    );

    let batch: Vec<BatchItem<'_>> = kept
        .iter()
        .map(|&i| BatchItem {
            task: &tasks[i],
            group: &groups[i],
            advantages: &advantages[i],
        })
        .collect();
    for _ in 0..cfg.inner_epochs {
        let grad = policy_gradient(
            &batch,
            &state.policy,
            &old,
            Some(&state.reference),
            &cfg.obj,
        )?;
        state.policy.apply_update(&grad, cfg.lr)?;
    }
    state.step += 1;
    Ok(StepOutcome {
        diagnostics,
        groups,
        advantages,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Fraction, not percent.
    pub auc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub policy: PolicyParams,
    pub trace: Vec<StepDiagnostics>,
    pub evals: Vec<EvalPoint>,
    ever_solved_ids: [BTreeSet<TaskId>; 3],
}

impl TrainingRun {
    /// Distinct tasks of `tier` answered correctly at least once during training.
    pub fn ever_solved(&self, tier: Tier) -> usize {
        self.ever_solved_ids
            .get(tier.index())
            .map_or(0, |s| s.len())
    }
}

/// Run `epochs` passes over `suite` starting from the uniform policy over
/// `vocab` tokens. `threads == 0` lets the pool pick a worker count.
pub fn run_training(
    cfg: &TrainConfig,
    suite: &[TaskSpec],
    vocab: usize,
    threads: usize,
) -> Result<TrainingRun, TrainError> {
    run_training_with(cfg, suite, vocab, threads, |_| Ok(()))
}

/// [`run_training`] with an observer called after every step.
pub fn run_training_with<F>(
    cfg: &TrainConfig,
    suite: &[TaskSpec],
    vocab: usize,
    threads: usize,
    mut observer: F,
) -> Result<TrainingRun, TrainError>
where
    F: FnMut(&StepOutcome) -> Result<(), TrainError> + Send,
{
    cfg.validate()?;
    if suite.is_empty() {
        return Err(TrainError::Config("suite is empty".into()));
    }
    let max_len = suite.iter().map(TaskSpec::answer_len).max().unwrap_or(1);
    let policy = PolicyParams::uniform(vocab, max_len)?;
    for task in suite {
        task.validate(vocab, max_len)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| TrainError::ThreadPool(e.to_string()))?;

    pool.install(|| {
        let mut state = TrainState::new(policy);
        let mut trace = Vec::new();
        let mut evals = Vec::new();
        let mut ever: [BTreeSet<TaskId>; 3] = Default::default();
        let steps_per_epoch = cfg.steps_per_epoch(suite.len());
        for epoch in 0..cfg.epochs {
            let order = shuffled(suite, cfg.seed, epoch);
            for chunk in order.chunks(cfg.tasks_per_step).take(steps_per_epoch) {
                let outcome = train_step(&mut state, chunk, cfg)?;
                for (task, g) in chunk.iter().zip(&outcome.groups) {
                    if g.correct_count(&cfg.scale) > 0 {
                        ever[task.tier.index()].insert(task.task_id);
                    }
                }
                observer(&outcome)?;
                trace.push(outcome.diagnostics);
                if cfg.eval_cadence > 0 && state.step.is_multiple_of(cfg.eval_cadence) {
                    let e = evaluate_policy(
                        &state.policy,
                        suite,
                        cfg.eval.samples,
                        cfg.eval.temperature,
                        &cfg.eval.ks,
                        cfg.seed ^ state.step as u64,
                        &cfg.scale,
                    )?;
                    evals.push(EvalPoint {
                        step: state.step,
                        auc: e.curve.auc,
                    });
                }
            }
        }
        Ok(TrainingRun {
            policy: state.policy,
            trace,
            evals,
            ever_solved_ids: ever,
        })
    })
}

fn shuffled(suite: &[TaskSpec], seed: u64, epoch: usize) -> Vec<TaskSpec> {
    use rand::seq::SliceRandom;
    let mut order = suite.to_vec();
    order.shuffle(&mut stream(seed, Purpose::Shuffle, &[epoch as u64]));
    order
}
