//! Group-relative advantage estimators.
//!
//! All estimators produce one advantage per response; the trainer broadcasts
//! it unchanged to every token of that response.
//!
//! * [`grpo_advantages`] standardizes rewards within the group.
//! * [`calibrated_advantages`] standardizes over the group augmented with `m`
//!   virtual rewards of magnitude `v` (NGRPO advantage calibration). Only the
//!   real samples receive advantages.
//! * [`fixed_advantages`] assigns constant values to correct / incorrect
//!   responses without normalization (PSR-NSR).
//! * [`value_baseline_advantages`] subtracts a caller-maintained running
//!   baseline. This is a lightweight stand-in for a PPO critic, not a critic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::RewardScale;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdvantageError {
    #[error("advantage normalization needs at least 2 rewards, got {0}")]
    TooFewRewards(usize),
    #[error("virtual sample count must be >= 1 for calibrated advantages")]
    ZeroVirtualCount,
    #[error("virtual reward {value} outside [{r_min}, {r_max}]")]
    VirtualOutOfRange { value: f64, r_min: f64, r_max: f64 },
    #[error("fixed advantages need binary rewards; rewards[{index}] = {reward}")]
    NonBinaryReward { index: usize, reward: f64 },
    #[error("eps_std must be a finite value >= 0, got {0}")]
    BadEpsStd(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Grpo,
    Ngrpo,
    Fixed,
    ValueBaseline,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Grpo => "grpo",
            Estimator::Ngrpo => "ngrpo",
            Estimator::Fixed => "fixed",
            Estimator::ValueBaseline => "value_baseline",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grpo" => Ok(Estimator::Grpo),
            "ngrpo" => Ok(Estimator::Ngrpo),
            "fixed" | "psr-nsr" | "psr_nsr" => Ok(Estimator::Fixed),
            "value_baseline" | "value-baseline" => Ok(Estimator::ValueBaseline),
            other => Err(format!(
                "unknown estimator `{other}` (expected grpo, ngrpo, fixed, value_baseline)"
            )),
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Standard-deviation denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdMode {
    /// Divide squared deviations by `n - 1`.
    #[default]
    Bessel,
    /// Divide squared deviations by `n`.
    Population,
}

impl std::str::FromStr for StdMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bessel" => Ok(StdMode::Bessel),
            "population" => Ok(StdMode::Population),
            other => Err(format!(
                "unknown std mode `{other}` (expected bessel, population)"
            )),
        }
    }
}

/// Reward assigned to the virtual sample(s).
///
/// `medium` is the midpoint of the reward scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MagnitudeRepr<S>", into = "MagnitudeRepr<S>")]
#[serde(bound = "S: Scalar + Serialize + for<'a> Deserialize<'a>")]
pub enum VirtualMagnitude<S> {
    Max,
    Min,
    Medium,
    Custom(S),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MagnitudeRepr<S> {
    Named(String),
    Value(S),
}

impl<S> TryFrom<MagnitudeRepr<S>> for VirtualMagnitude<S> {
    type Error = String;

    fn try_from(r: MagnitudeRepr<S>) -> Result<Self, Self::Error> {
        match r {
            MagnitudeRepr::Named(name) => match name.as_str() {
                "max" => Ok(VirtualMagnitude::Max),
                "min" => Ok(VirtualMagnitude::Min),
                "medium" => Ok(VirtualMagnitude::Medium),
                other => Err(format!(
                    "unknown virtual magnitude `{other}` (expected max, min, medium or a number)"
                )),
            },
            MagnitudeRepr::Value(v) => Ok(VirtualMagnitude::Custom(v)),
        }
    }
}

impl<S> From<VirtualMagnitude<S>> for MagnitudeRepr<S> {
    fn from(m: VirtualMagnitude<S>) -> Self {
        match m {
            VirtualMagnitude::Max => MagnitudeRepr::Named("max".into()),
            VirtualMagnitude::Min => MagnitudeRepr::Named("min".into()),
            VirtualMagnitude::Medium => MagnitudeRepr::Named("medium".into()),
            VirtualMagnitude::Custom(v) => MagnitudeRepr::Value(v),
        }
    }
}

impl<S: Scalar> std::str::FromStr for VirtualMagnitude<S> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(VirtualMagnitude::Max),
            "min" => Ok(VirtualMagnitude::Min),
            "medium" => Ok(VirtualMagnitude::Medium),
            other => other
                .parse::<f64>()
                .map(|v| VirtualMagnitude::Custom(S::lit(v)))
                .map_err(|_| format!("unknown virtual magnitude `{other}`")),
        }
    }
}

impl<S: Scalar> VirtualMagnitude<S> {
    pub fn resolve(&self, scale: &RewardScale<S>) -> Result<S, AdvantageError> {
        let v = match *self {
            VirtualMagnitude::Max => scale.r_max(),
            VirtualMagnitude::Min => scale.r_min(),
            VirtualMagnitude::Medium => scale.midpoint(),
            VirtualMagnitude::Custom(v) => v,
        };
        if scale.contains(v) {
            Ok(v)
        } else {
            Err(AdvantageError::VirtualOutOfRange {
                value: v.as_f64(),
                r_min: scale.r_min().as_f64(),
                r_max: scale.r_max().as_f64(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[serde(bound = "S: Scalar + Serialize + for<'a> Deserialize<'a>")]
pub struct AdvantageConfig<S> {
    pub estimator: Estimator,
    pub virtual_magnitude: VirtualMagnitude<S>,
    pub virtual_count: usize,
    pub std_mode: StdMode,
    pub eps_std: S,
    pub fixed_pos: S,
    pub fixed_neg: S,
}

impl<S: Scalar> Default for AdvantageConfig<S> {
    fn default() -> Self {
        AdvantageConfig {
            estimator: Estimator::Grpo,
            virtual_magnitude: VirtualMagnitude::Max,
            virtual_count: 1,
            std_mode: StdMode::Bessel,
            eps_std: S::lit(1e-6),
            fixed_pos: S::lit(0.1),
            fixed_neg: S::lit(-1.0),
        }
    }
}

impl<S: Scalar> AdvantageConfig<S> {
    pub fn with_estimator(estimator: Estimator) -> Self {
        AdvantageConfig {
            estimator,
            ..Self::default()
        }
    }

    pub fn validate(&self, scale: &RewardScale<S>) -> Result<(), AdvantageError> {
        if !self.eps_std.is_finite() || self.eps_std < S::zero() {
            return Err(AdvantageError::BadEpsStd(self.eps_std.as_f64()));
        }
        if self.estimator == Estimator::Ngrpo {
            if self.virtual_count == 0 {
                return Err(AdvantageError::ZeroVirtualCount);
            }
            self.virtual_magnitude.resolve(scale)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvantageResult<S> {
    pub advantages: Vec<S>,
    /// Mean used for centering (μ, μ', or the baseline).
    pub mean_used: S,
    /// Standard deviation used for scaling (σ or σ'); zero when unnormalized.
    pub std_used: S,
    pub estimator: Estimator,
}

impl<S: Scalar> AdvantageResult<S> {
    pub fn sum(&self) -> S {
        self.advantages.iter().copied().sum()
    }
}

/// Mean and standard deviation of `values`, which must be non-empty.
fn moments<S: Scalar>(values: &[S], mode: StdMode) -> (S, S) {
    let n = S::from_count(values.len());
    let mean = values.iter().copied().sum::<S>() / n;
    let sq: S = values.iter().map(|&r| (r - mean) * (r - mean)).sum();
    let denom = match mode {
        StdMode::Bessel => n - S::one(),
        StdMode::Population => n,
    };
    (mean, (sq / denom).sqrt())
}

fn standardize<S: Scalar>(rewards: &[S], mean: S, std: S, eps: S) -> Vec<S> {
    rewards.iter().map(|&r| (r - mean) / (std + eps)).collect()
}

/// Group-normalized advantages `(r_i - mean) / (std + eps_std)`.
pub fn grpo_advantages<S: Scalar>(
    rewards: &[S],
    cfg: &AdvantageConfig<S>,
) -> Result<AdvantageResult<S>, AdvantageError> {
    if rewards.len() < 2 {
        return Err(AdvantageError::TooFewRewards(rewards.len()));
    }
    let (mean, std) = moments(rewards, cfg.std_mode);
    Ok(AdvantageResult {
        advantages: standardize(rewards, mean, std, cfg.eps_std),
        mean_used: mean,
        std_used: std,
        estimator: Estimator::Grpo,
    })
}

/// Moments of the rewards augmented with `m` copies of the virtual reward `v`.
pub fn augmented_moments<S: Scalar>(
    rewards: &[S],
    v: S,
    m: usize,
    std_mode: StdMode,
) -> Result<(S, S), AdvantageError> {
    if rewards.len() < 2 {
        return Err(AdvantageError::TooFewRewards(rewards.len()));
    }
    if m == 0 {
        return Err(AdvantageError::ZeroVirtualCount);
    }
    let augmented: Vec<S> = rewards
        .iter()
        .copied()
        .chain(std::iter::repeat_n(v, m))
        .collect();
    Ok(moments(&augmented, std_mode))
}

/// NGRPO calibrated advantages `(r_i - μ') / (σ' + eps_std)` for the G real samples.
pub fn calibrated_advantages<S: Scalar>(
    rewards: &[S],
    cfg: &AdvantageConfig<S>,
    scale: &RewardScale<S>,
) -> Result<AdvantageResult<S>, AdvantageError> {
    let v = cfg.virtual_magnitude.resolve(scale)?;
    let (mean, std) = augmented_moments(rewards, v, cfg.virtual_count, cfg.std_mode)?;
    Ok(AdvantageResult {
        advantages: standardize(rewards, mean, std, cfg.eps_std),
        mean_used: mean,
        std_used: std,
        estimator: Estimator::Ngrpo,
    })
}

/// PSR-NSR fixed advantages: `fixed_pos` for `r_max`, `fixed_neg` for `r_min`.
pub fn fixed_advantages<S: Scalar>(
    rewards: &[S],
    cfg: &AdvantageConfig<S>,
    scale: &RewardScale<S>,
) -> Result<AdvantageResult<S>, AdvantageError> {
    let advantages = rewards
        .iter()
        .enumerate()
        .map(|(index, &r)| {
            if scale.is_max(r) {
                Ok(cfg.fixed_pos)
            } else if scale.is_min(r) {
                Ok(cfg.fixed_neg)
            } else {
                Err(AdvantageError::NonBinaryReward {
                    index,
                    reward: r.as_f64(),
                })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AdvantageResult {
        advantages,
        mean_used: S::zero(),
        std_used: S::zero(),
        estimator: Estimator::Fixed,
    })
}

/// `r_i - baseline`; the caller owns the running baseline.
pub fn value_baseline_advantages<S: Scalar>(rewards: &[S], baseline: S) -> AdvantageResult<S> {
    AdvantageResult {
        advantages: rewards.iter().map(|&r| r - baseline).collect(),
        mean_used: baseline,
        std_used: S::zero(),
        estimator: Estimator::ValueBaseline,
    }
}

/// Dispatch on `cfg.estimator`. `baseline` is only read by the value-baseline
/// estimator.
pub fn compute_advantages<S: Scalar>(
    rewards: &[S],
    cfg: &AdvantageConfig<S>,
    scale: &RewardScale<S>,
    baseline: S,
) -> Result<AdvantageResult<S>, AdvantageError> {
    match cfg.estimator {
        Estimator::Grpo => grpo_advantages(rewards, cfg),
        Estimator::Ngrpo => calibrated_advantages(rewards, cfg, scale),
        Estimator::Fixed => fixed_advantages(rewards, cfg, scale),
        Estimator::ValueBaseline => Ok(value_baseline_advantages(rewards, baseline)),
    }
}
