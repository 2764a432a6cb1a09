//! A desk-scale laboratory for group-relative policy optimization.
//!
//! Compares GRPO, NGRPO (advantage calibration with a virtual maximum-reward
//! sample plus asymmetric clipping), PSR-NSR fixed advantages, DAPO-style
//! group filtering and a running-mean value baseline on synthetic
//! exact-match tasks, with a tabular softmax policy standing in for an LLM.
//!
//! The estimator, surrogate and metric code is generic over [`Scalar`]; the
//! aliases below pin the `f64` instantiation used by the trainer and CLI.

pub mod advantage;
pub mod config;
pub mod evalkit;
pub mod group;
pub mod policy;
pub mod scalar;
pub mod seeding;
pub mod surrogate;
pub mod tasks;
pub mod trainer;

pub use advantage::{Estimator, StdMode};
pub use group::{classify_group, GroupClass, TaskId, TaskSpec, Tier, Token};
pub use policy::{GradientTable, PolicyParams, StateKey};
pub use scalar::Scalar;
pub use tasks::{make_suite, verify, SuiteConfig};
pub use trainer::{FilterMode, StepDiagnostics, TrainConfig, TrainingRun};

pub type Trajectory = group::Trajectory<f64>;
pub type RewardedGroup = group::RewardedGroup<f64>;
pub type RewardScale = group::RewardScale<f64>;
pub type AdvantageConfig = advantage::AdvantageConfig<f64>;
pub type AdvantageResult = advantage::AdvantageResult<f64>;
pub type VirtualMagnitude = advantage::VirtualMagnitude<f64>;
pub type ClipConfig = surrogate::ClipConfig<f64>;
pub type ObjectiveConfig = surrogate::ObjectiveConfig<f64>;
pub type PassAtKCurve = evalkit::PassAtKCurve<f64>;
