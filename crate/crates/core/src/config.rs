//! Run configuration files.
//!
//! A run is described by a TOML file with the sections `[suite]`, `[train]`,
//! `[advantage]`, `[clip]`, `[objective]`, `[reward]` and `[eval]`. Every key
//! is optional and defaults to the values below; unknown keys are rejected.
//! The fully resolved configuration is written back as JSON, and either
//! format is accepted on input.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::{AdvantageConfig, Estimator};
use crate::group::RewardScale;
use crate::surrogate::{ClipConfig, NegativeBranch, ObjectiveConfig};
use crate::tasks::SuiteConfig;
use crate::trainer::{EvalSettings, FilterMode, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: &'static str, msg: String },
}

fn invalid(key: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub group_size: usize,
    pub tasks_per_step: usize,
    pub epochs: usize,
    pub lr: f64,
    pub inner_epochs: usize,
    pub filter: FilterMode,
    pub seed: u64,
    pub eval_cadence: usize,
    pub baseline_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            group_size: t.group_size,
            tasks_per_step: t.tasks_per_step,
            epochs: t.epochs,
            lr: t.lr,
            inner_epochs: t.inner_epochs,
            filter: t.filter,
            seed: t.seed,
            eval_cadence: t.eval_cadence,
            baseline_decay: t.baseline_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipSection {
    /// When set, both sides use `eps`.
    pub symmetric: bool,
    pub eps: f64,
    pub eps_pos: f64,
    pub eps_neg: f64,
    /// Use the literal `max(ρA, (1 - eps_neg)A)` negative branch.
    pub literal_negative_branch: bool,
}

impl Default for ClipSection {
    fn default() -> Self {
        ClipSection {
            symmetric: false,
            eps: 0.2,
            eps_pos: 0.24,
            eps_neg: 0.16,
            literal_negative_branch: false,
        }
    }
}

impl ClipSection {
    pub fn resolve(&self) -> ClipConfig<f64> {
        let mut clip = if self.symmetric {
            ClipConfig::symmetric(self.eps)
        } else {
            ClipConfig::asymmetric(self.eps_pos, self.eps_neg)
        };
        if self.literal_negative_branch {
            clip.negative_branch = NegativeBranch::Literal;
        }
        clip
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub kl_beta: f64,
    pub use_kl: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            r_min: 0.0,
            r_max: 1.0,
        }
    }
}

/// Contents of a run configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub suite: SuiteConfig,
    pub train: TrainSection,
    pub advantage: AdvantageConfig<f64>,
    pub clip: ClipSection,
    pub objective: ObjectiveSection,
    pub reward: RewardSection,
    pub eval: EvalSettings,
}

/// A validated run: everything the trainer and evaluator need.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub suite: SuiteConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parse TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve(&self) -> Result<ResolvedRun, ConfigError> {
        let scale = RewardScale::new(self.reward.r_min, self.reward.r_max)
            .map_err(|e| invalid("reward.r_min", e.to_string()))?;
        self.suite
            .validate()
            .map_err(|e| invalid("suite", e.to_string()))?;

        let t = &self.train;
        if t.group_size < 2 {
            return Err(invalid("train.group_size", "must be >= 2"));
        }
        if t.tasks_per_step < 1 {
            return Err(invalid("train.tasks_per_step", "must be >= 1"));
        }
        if t.lr <= 0.0 || !t.lr.is_finite() {
            return Err(invalid("train.lr", "must be a finite value > 0"));
        }
        if t.inner_epochs < 1 {
            return Err(invalid("train.inner_epochs", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&t.baseline_decay) {
            return Err(invalid("train.baseline_decay", "must lie in [0, 1)"));
        }

        let adv = self.advantage;
        if !adv.eps_std.is_finite() || adv.eps_std < 0.0 {
            return Err(invalid("advantage.eps_std", "must be a finite value >= 0"));
        }
        if adv.estimator == Estimator::Ngrpo {
            if adv.virtual_count == 0 {
                return Err(invalid(
                    "advantage.virtual_count",
                    "must be >= 1 for estimator ngrpo",
                ));
            }
            adv.virtual_magnitude
                .resolve(&scale)
                .map_err(|e| invalid("advantage.virtual_magnitude", e.to_string()))?;
        }

        let clip = self.clip.resolve();
        if self.clip.symmetric {
            if !(self.clip.eps > 0.0 && self.clip.eps < 1.0) {
                return Err(invalid("clip.eps", "must lie in (0, 1)"));
            }
        } else {
            if clip.eps_pos <= 0.0 || !clip.eps_pos.is_finite() {
                return Err(invalid("clip.eps_pos", "must be a finite value > 0"));
            }
            if !(clip.eps_neg > 0.0 && clip.eps_neg < 1.0) {
                return Err(invalid("clip.eps_neg", "must lie in (0, 1)"));
            }
        }

        let obj = ObjectiveConfig {
            clip,
            kl_beta: self.objective.kl_beta,
            use_kl: self.objective.use_kl,
        };
        if !obj.kl_beta.is_finite() || obj.kl_beta < 0.0 {
            return Err(invalid("objective.kl_beta", "must be a finite value >= 0"));
        }
        if obj.use_kl && adv.estimator == Estimator::Ngrpo {
            return Err(invalid(
                "objective.use_kl",
                "the NGRPO objective has no KL term; use_kl must be false for estimator ngrpo",
            ));
        }

        let e = &self.eval;
        if e.ks.is_empty() || e.ks[0] == 0 || e.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(
                "eval.ks",
                "must be a non-empty, strictly increasing list of positive integers",
            ));
        }
        if *e.ks.last().expect("non-empty") > e.samples {
            return Err(invalid(
                "eval.samples",
                "must be >= the largest k in eval.ks",
            ));
        }
        if e.temperature <= 0.0 || !e.temperature.is_finite() {
            return Err(invalid("eval.temperature", "must be a finite value > 0"));
        }

        let train = TrainConfig {
            group_size: t.group_size,
            tasks_per_step: t.tasks_per_step,
            epochs: t.epochs,
            lr: t.lr,
            inner_epochs: t.inner_epochs,
            filter: t.filter,
            adv,
            obj,
            seed: t.seed,
            eval_cadence: t.eval_cadence,
            eval: e.clone(),
            baseline_decay: t.baseline_decay,
            scale,
        };
        train
            .validate()
            .map_err(|err| invalid("train", err.to_string()))?;
        Ok(ResolvedRun {
            suite: self.suite.clone(),
            train,
        })
    }
}
