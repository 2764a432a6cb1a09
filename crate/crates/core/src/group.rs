//! Core data model: tasks, sampled trajectories, rewarded groups.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{reward_eq, Scalar};

/// Abstract answer token, always in `[0, V)`.
pub type Token = u32;

/// Identifier of a task within a suite.
pub type TaskId = u32;

/// Default maximum answer length.
pub const DEFAULT_MAX_LEN: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupError {
    #[error("answer length {len} outside [1, {max_len}]")]
    AnswerLength { len: usize, max_len: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: Token, vocab: usize },
    #[error("trajectory has {tokens} tokens but {logps} log-probabilities")]
    LogpLength { tokens: usize, logps: usize },
    #[error("trajectory must contain at least one token")]
    EmptyTrajectory,
    #[error("behavior log-probability {0} is not a finite value <= 0")]
    BadLogp(f64),
    #[error("group needs at least 2 trajectories, got {0}")]
    GroupTooSmall(usize),
    #[error("reward {reward} outside [{r_min}, {r_max}]")]
    RewardOutOfRange { reward: f64, r_min: f64, r_max: f64 },
    #[error("rewards[{index}] = {listed} disagrees with trajectory reward {actual}")]
    RewardMismatch {
        index: usize,
        listed: f64,
        actual: f64,
    },
    #[error("reward scale requires r_min < r_max (got {r_min}, {r_max})")]
    BadScale { r_min: f64, r_max: f64 },
}

/// Difficulty tier of a synthetic task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Easy, Tier::Medium, Tier::Hard];

    pub fn index(self) -> usize {
        match self {
            Tier::Easy => 0,
            Tier::Medium => 1,
            Tier::Hard => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
        }
    }
}

impl std::str::FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(Tier::Easy),
            "medium" => Ok(Tier::Medium),
            "hard" => Ok(Tier::Hard),
            other => Err(format!("unknown tier `{other}`")),
        }
    }
}

/// A synthetic verifiable problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    /// Feature tuple identifying the prompt; unique within a suite.
    pub context: Vec<u32>,
    pub answer: Vec<Token>,
    pub tier: Tier,
}

impl TaskSpec {
    pub fn new(
        task_id: TaskId,
        context: Vec<u32>,
        answer: Vec<Token>,
        tier: Tier,
        vocab: usize,
        max_len: usize,
    ) -> Result<Self, GroupError> {
        let task = TaskSpec {
            task_id,
            context,
            answer,
            tier,
        };
        task.validate(vocab, max_len)?;
        Ok(task)
    }

    pub fn validate(&self, vocab: usize, max_len: usize) -> Result<(), GroupError> {
        let len = self.answer.len();
        if len == 0 || len > max_len {
            return Err(GroupError::AnswerLength { len, max_len });
        }
        if let Some(&token) = self.answer.iter().find(|&&t| t as usize >= vocab) {
            return Err(GroupError::TokenOutOfRange { token, vocab });
        }
        Ok(())
    }

    pub fn answer_len(&self) -> usize {
        self.answer.len()
    }
}

/// Closed reward interval `[r_min, r_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "ScaleRepr<S>",
    bound = "S: Scalar + Serialize + for<'a> Deserialize<'a>"
)]
pub struct RewardScale<S> {
    r_min: S,
    r_max: S,
}

#[derive(Deserialize)]
struct ScaleRepr<S> {
    r_min: S,
    r_max: S,
}

impl<S: Scalar> TryFrom<ScaleRepr<S>> for RewardScale<S> {
    type Error = GroupError;

    fn try_from(r: ScaleRepr<S>) -> Result<Self, Self::Error> {
        RewardScale::new(r.r_min, r.r_max)
    }
}

impl<S: Scalar> RewardScale<S> {
    pub fn new(r_min: S, r_max: S) -> Result<Self, GroupError> {
        // `!(a < b)` also rejects NaN.
        if r_min >= r_max || !r_min.is_finite() || !r_max.is_finite() {
            return Err(GroupError::BadScale {
                r_min: r_min.as_f64(),
                r_max: r_max.as_f64(),
            });
        }
        Ok(RewardScale { r_min, r_max })
    }

    pub fn r_min(&self) -> S {
        self.r_min
    }

    pub fn r_max(&self) -> S {
        self.r_max
    }

    pub fn midpoint(&self) -> S {
        (self.r_min + self.r_max) / S::lit(2.0)
    }

    pub fn contains(&self, r: S) -> bool {
        r >= self.r_min && r <= self.r_max
    }

    pub fn is_max(&self, r: S) -> bool {
        reward_eq(r, self.r_max)
    }

    pub fn is_min(&self, r: S) -> bool {
        reward_eq(r, self.r_min)
    }

    fn check(&self, r: S) -> Result<(), GroupError> {
        if self.contains(r) {
            Ok(())
        } else {
            Err(GroupError::RewardOutOfRange {
                reward: r.as_f64(),
                r_min: self.r_min.as_f64(),
                r_max: self.r_max.as_f64(),
            })
        }
    }
}

impl<S: Scalar> Default for RewardScale<S> {
    fn default() -> Self {
        RewardScale {
            r_min: S::zero(),
            r_max: S::one(),
        }
    }
}

/// One sampled response with its behavior log-probabilities and reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<S> {
    pub tokens: Vec<Token>,
    pub behavior_logps: Vec<S>,
    pub reward: S,
}

impl<S: Scalar> Trajectory<S> {
    pub fn new(tokens: Vec<Token>, behavior_logps: Vec<S>, reward: S) -> Result<Self, GroupError> {
        let t = Trajectory {
            tokens,
            behavior_logps,
            reward,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), GroupError> {
        if self.tokens.is_empty() {
            return Err(GroupError::EmptyTrajectory);
        }
        if self.tokens.len() != self.behavior_logps.len() {
            return Err(GroupError::LogpLength {
                tokens: self.tokens.len(),
                logps: self.behavior_logps.len(),
            });
        }
        if let Some(&bad) = self
            .behavior_logps
            .iter()
            .find(|l| !l.is_finite() || **l > S::zero())
        {
            return Err(GroupError::BadLogp(bad.as_f64()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn total_logp(&self) -> S {
        self.behavior_logps.iter().copied().sum()
    }
}

/// The G trajectories sampled for one task, with their rewards.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardedGroup<S> {
    task_id: TaskId,
    rewards: Vec<S>,
    trajectories: Vec<Trajectory<S>>,
}

/// Serialized form of a [`RewardedGroup`]; validated by
/// [`RewardedGroup::from_record`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupRecord<S> {
    pub task_id: TaskId,
    pub rewards: Vec<S>,
    pub trajectories: Vec<Trajectory<S>>,
}

impl<S: Scalar> RewardedGroup<S> {
    pub fn new(
        task_id: TaskId,
        trajectories: Vec<Trajectory<S>>,
        scale: &RewardScale<S>,
    ) -> Result<Self, GroupError> {
        if trajectories.len() < 2 {
            return Err(GroupError::GroupTooSmall(trajectories.len()));
        }
        for t in &trajectories {
            t.validate()?;
            scale.check(t.reward)?;
        }
        let rewards = trajectories.iter().map(|t| t.reward).collect();
        Ok(RewardedGroup {
            task_id,
            rewards,
            trajectories,
        })
    }

    pub fn from_record(record: GroupRecord<S>, scale: &RewardScale<S>) -> Result<Self, GroupError> {
        for (index, (listed, t)) in record.rewards.iter().zip(&record.trajectories).enumerate() {
            if listed != &t.reward {
                return Err(GroupError::RewardMismatch {
                    index,
                    listed: listed.as_f64(),
                    actual: t.reward.as_f64(),
                });
            }
        }
        if record.rewards.len() != record.trajectories.len() {
            return Err(GroupError::RewardMismatch {
                index: record.rewards.len().min(record.trajectories.len()),
                listed: f64::NAN,
                actual: f64::NAN,
            });
        }
        Self::new(record.task_id, record.trajectories, scale)
    }

    pub fn task_id(&self) -> TaskId {
        self.task_id
    }

    pub fn rewards(&self) -> &[S] {
        &self.rewards
    }

    pub fn trajectories(&self) -> &[Trajectory<S>] {
        &self.trajectories
    }

    /// Group size G.
    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn correct_count(&self, scale: &RewardScale<S>) -> usize {
        self.rewards.iter().filter(|&&r| scale.is_max(r)).count()
    }
}

/// Homogeneity label of a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupClass {
    HomogeneousCorrect,
    HomogeneousIncorrect,
    Mixed,
}

pub fn classify_group<S: Scalar>(group: &RewardedGroup<S>, scale: &RewardScale<S>) -> GroupClass {
    classify_rewards(group.rewards(), scale)
}

/// Classification on a bare reward vector; an empty vector counts as mixed.
pub fn classify_rewards<S: Scalar>(rewards: &[S], scale: &RewardScale<S>) -> GroupClass {
    if rewards.is_empty() {
        GroupClass::Mixed
    } else if rewards.iter().all(|&r| scale.is_max(r)) {
        GroupClass::HomogeneousCorrect
    } else if rewards.iter().all(|&r| scale.is_min(r)) {
        GroupClass::HomogeneousIncorrect
    } else {
        GroupClass::Mixed
    }
}
