//! Synthetic verifiable-reward task suites.
//!
//! Each task has a single correct answer; verification is exact match. Under
//! a uniform policy a response of length `L` is correct with probability
//! `V^-L`, so hard tasks start out almost always homogeneous-incorrect.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{GroupError, RewardScale, TaskSpec, Tier, Token};
use crate::scalar::Scalar;
use crate::seeding::{stream, Purpose};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("suite must contain at least one task")]
    EmptySuite,
    #[error("vocabulary size must be >= 2, got {0}")]
    BadVocab(usize),
    #[error("answer length for tier {tier} must be >= 1")]
    ZeroLength { tier: &'static str },
    #[error("duplicate {what} in suite: {value}")]
    Duplicate { what: &'static str, value: String },
    #[error("invalid task {task_id}: {source}")]
    InvalidTask { task_id: u32, source: GroupError },
    #[error("malformed suite JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub n_easy: usize,
    pub n_medium: usize,
    pub n_hard: usize,
    pub vocab: usize,
    pub len_easy: usize,
    pub len_medium: usize,
    pub len_hard: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            n_easy: 16,
            n_medium: 16,
            n_hard: 32,
            vocab: 10,
            len_easy: 1,
            len_medium: 2,
            len_hard: 3,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn len_for(&self, tier: Tier) -> usize {
        match tier {
            Tier::Easy => self.len_easy,
            Tier::Medium => self.len_medium,
            Tier::Hard => self.len_hard,
        }
    }

    pub fn count_for(&self, tier: Tier) -> usize {
        match tier {
            Tier::Easy => self.n_easy,
            Tier::Medium => self.n_medium,
            Tier::Hard => self.n_hard,
        }
    }

    pub fn total(&self) -> usize {
        self.n_easy + self.n_medium + self.n_hard
    }

    /// Longest answer in the suite; the policy's `L_max`.
    pub fn max_len(&self) -> usize {
        Tier::ALL
            .iter()
            .filter(|&&t| self.count_for(t) > 0)
            .map(|&t| self.len_for(t))
            .max()
            .unwrap_or(1)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.total() == 0 {
            return Err(TaskError::EmptySuite);
        }
        if self.vocab < 2 {
            return Err(TaskError::BadVocab(self.vocab));
        }
        for tier in Tier::ALL {
            if self.len_for(tier) == 0 {
                return Err(TaskError::ZeroLength { tier: tier.name() });
            }
        }
        Ok(())
    }

    /// Probability that a uniform policy answers a task of `tier` correctly.
    pub fn uniform_success(&self, tier: Tier) -> f64 {
        (self.vocab as f64).powi(-(self.len_for(tier) as i32))
    }
}

/// Generate a suite deterministically from its config.
///
/// Tasks are numbered `0..total` in tier order easy, medium, hard; the
/// context of a task is `[tier index, ordinal within tier]`.
pub fn make_suite(cfg: &SuiteConfig) -> Result<Vec<TaskSpec>, TaskError> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, Purpose::Suite, &[]);
    let max_len = cfg.max_len();
    let mut tasks = Vec::with_capacity(cfg.total());
    for tier in Tier::ALL {
        for ordinal in 0..cfg.count_for(tier) {
            let answer: Vec<Token> = (0..cfg.len_for(tier))
                .map(|_| rng.gen_range(0..cfg.vocab) as Token)
                .collect();
            let task_id = tasks.len() as u32;
            let task = TaskSpec::new(
                task_id,
                vec![tier.index() as u32, ordinal as u32],
                answer,
                tier,
                cfg.vocab,
                max_len,
            )
            .map_err(|source| TaskError::InvalidTask { task_id, source })?;
            tasks.push(task);
        }
    }
    Ok(tasks)
}

/// Exact-match verifier: `r_max` iff `tokens == answer`, else `r_min`.
///
/// A length mismatch is an incorrect response and is logged.
pub fn verify<S: Scalar>(task: &TaskSpec, tokens: &[Token], scale: &RewardScale<S>) -> S {
    if tokens.len() != task.answer.len() {
        log::warn!(
            "task {}: response has {} tokens, answer has {}",
            task.task_id,
            tokens.len(),
            task.answer.len()
        );
        return scale.r_min();
    }
    if tokens == task.answer.as_slice() {
        scale.r_max()
    } else {
        scale.r_min()
    }
}

pub fn suite_to_json(tasks: &[TaskSpec]) -> String {
    serde_json::to_string_pretty(tasks).expect("suite serializes")
}

/// Parse and validate a suite file.
pub fn suite_from_json(
    text: &str,
    vocab: usize,
    max_len: usize,
) -> Result<Vec<TaskSpec>, TaskError> {
    let tasks: Vec<TaskSpec> = serde_json::from_str(text)?;
    if tasks.is_empty() {
        return Err(TaskError::EmptySuite);
    }
    let mut ids = HashSet::new();
    let mut contexts = HashSet::new();
    for t in &tasks {
        t.validate(vocab, max_len)
            .map_err(|source| TaskError::InvalidTask {
                task_id: t.task_id,
                source,
            })?;
        if !ids.insert(t.task_id) {
            return Err(TaskError::Duplicate {
                what: "task_id",
                value: t.task_id.to_string(),
            });
        }
        if !contexts.insert(t.context.clone()) {
            return Err(TaskError::Duplicate {
                what: "context",
                value: format!("{:?}", t.context),
            });
        }
    }
    Ok(tasks)
}
