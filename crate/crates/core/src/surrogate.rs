//! Clipped surrogate objectives, the k3 KL estimator, and the analytic
//! gradient of the batch objective with respect to the tabular logits.
//!
//! The group objective is
//! `1/G Σ_i 1/|o_i| Σ_t [clip_term(ρ_it, A_i) - β·kl_k3(t)]`
//! and the batch objective is the sum of group objectives.

use rayon::prelude::*;
use thiserror::Error;

use crate::advantage::Estimator;
use crate::group::{RewardedGroup, TaskSpec, Trajectory};
use crate::policy::{GradientTable, PolicyError, PolicyParams, StateKey};
use crate::scalar::Scalar;

/// Tolerance of the stale-snapshot guard.
pub const SNAPSHOT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("log-probabilities must be finite (got new={new}, old={old})")]
    NonFinite { new: f64, old: f64 },
    #[error(
        "clip bounds invalid: need eps_pos > 0 and 0 < eps_neg < 1 (got {eps_pos}, {eps_neg})"
    )]
    BadClip { eps_pos: f64, eps_neg: f64 },
    #[error("kl_beta must be a finite value >= 0, got {0}")]
    BadBeta(f64),
    #[error("the NGRPO objective has no KL term; use_kl must be off for estimator ngrpo")]
    KlWithNgrpo,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("KL term enabled but no reference log-probabilities supplied")]
    MissingReference,
    #[error(
        "stale snapshot for task {task_id}, response {response}, position {position}: \
         stored {stored}, snapshot gives {snapshot}"
    )]
    StaleSnapshot {
        task_id: u32,
        response: usize,
        position: usize,
        stored: f64,
        snapshot: f64,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Which form of the negative-advantage branch to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NegativeBranch {
    /// `max(ρ, 1 - eps_neg) · A`, i.e. the ratio is clipped from below.
    #[default]
    Standard,
    /// `max(ρ·A, (1 - eps_neg)·A)` taken literally, which equals
    /// `min(ρ, 1 - eps_neg) · A` for `A < 0`. Kept for comparison only.
    Literal,
}

/// Clip range `[1 - eps_neg, 1 + eps_pos]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig<S> {
    pub eps_pos: S,
    pub eps_neg: S,
    pub negative_branch: NegativeBranch,
}

impl<S: Scalar> ClipConfig<S> {
    pub fn symmetric(eps: S) -> Self {
        ClipConfig {
            eps_pos: eps,
            eps_neg: eps,
            negative_branch: NegativeBranch::Standard,
        }
    }

    pub fn asymmetric(eps_pos: S, eps_neg: S) -> Self {
        ClipConfig {
            eps_pos,
            eps_neg,
            negative_branch: NegativeBranch::Standard,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.eps_pos == self.eps_neg
    }

    pub fn validate(&self) -> Result<(), SurrogateError> {
        let ok = self.eps_pos > S::zero()
            && self.eps_pos.is_finite()
            && self.eps_neg > S::zero()
            && self.eps_neg < S::one();
        if ok {
            Ok(())
        } else {
            Err(SurrogateError::BadClip {
                eps_pos: self.eps_pos.as_f64(),
                eps_neg: self.eps_neg.as_f64(),
            })
        }
    }

    pub fn lower(&self) -> S {
        S::one() - self.eps_neg
    }

    pub fn upper(&self) -> S {
        S::one() + self.eps_pos
    }
}

impl<S: Scalar> Default for ClipConfig<S> {
    /// The NGRPO asymmetric range (0.24 / 0.16).
    fn default() -> Self {
        ClipConfig::asymmetric(S::lit(0.24), S::lit(0.16))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig<S> {
    pub clip: ClipConfig<S>,
    pub kl_beta: S,
    pub use_kl: bool,
}

impl<S: Scalar> Default for ObjectiveConfig<S> {
    fn default() -> Self {
        ObjectiveConfig {
            clip: ClipConfig::default(),
            kl_beta: S::zero(),
            use_kl: false,
        }
    }
}

impl<S: Scalar> ObjectiveConfig<S> {
    pub fn validate(&self, estimator: Estimator) -> Result<(), SurrogateError> {
        self.clip.validate()?;
        if !self.kl_beta.is_finite() || self.kl_beta < S::zero() {
            return Err(SurrogateError::BadBeta(self.kl_beta.as_f64()));
        }
        if self.use_kl && estimator == Estimator::Ngrpo {
            return Err(SurrogateError::KlWithNgrpo);
        }
        Ok(())
    }

    fn kl_weight(&self) -> Option<S> {
        (self.use_kl && self.kl_beta > S::zero()).then_some(self.kl_beta)
    }
}

/// `exp(logp_new - logp_old)`.
pub fn importance_ratio<S: Scalar>(logp_new: S, logp_old: S) -> Result<S, SurrogateError> {
    if !logp_new.is_finite() || !logp_old.is_finite() {
        return Err(SurrogateError::NonFinite {
            new: logp_new.as_f64(),
            old: logp_old.as_f64(),
        });
    }
    Ok((logp_new - logp_old).exp())
}

/// Per-token clipped surrogate value.
///
/// Positive advantages use `min(ρ, 1 + eps_pos) · A`; negative ones use
/// `max(ρ, 1 - eps_neg) · A`. Together this equals
/// `min(ρ·A, clip(ρ, 1 - eps_neg, 1 + eps_pos)·A)`.
pub fn clipped_term<S: Scalar>(rho: S, adv: S, clip: &ClipConfig<S>) -> S {
    if adv >= S::zero() {
        rho.min(clip.upper()) * adv
    } else {
        match clip.negative_branch {
            NegativeBranch::Standard => rho.max(clip.lower()) * adv,
            NegativeBranch::Literal => rho.min(clip.lower()) * adv,
        }
    }
}

/// `∂ clipped_term / ∂ρ`. At a clip boundary the unclipped branch is used.
pub fn clipped_term_slope<S: Scalar>(rho: S, adv: S, clip: &ClipConfig<S>) -> S {
    let active = if adv >= S::zero() {
        rho <= clip.upper()
    } else {
        match clip.negative_branch {
            NegativeBranch::Standard => rho >= clip.lower(),
            NegativeBranch::Literal => rho <= clip.lower(),
        }
    };
    if active {
        adv
    } else {
        S::zero()
    }
}

/// k3 estimator `u - ln u - 1` with `u = π_ref / π_θ`.
pub fn kl_k3<S: Scalar>(logp_new: S, logp_ref: S) -> S {
    let log_u = logp_ref - logp_new;
    log_u.exp() - log_u - S::one()
}

/// `∂ kl_k3 / ∂ logp_new = 1 - u`.
pub fn kl_k3_slope<S: Scalar>(logp_new: S, logp_ref: S) -> S {
    S::one() - (logp_ref - logp_new).exp()
}

fn check_shape<S>(what: &str, expected: &[usize], got: &[Vec<S>]) -> Result<(), SurrogateError> {
    let got_shape: Vec<usize> = got.iter().map(Vec::len).collect();
    if got_shape != expected {
        return Err(SurrogateError::Shape(format!(
            "{what} has shape {got_shape:?}, trajectories have {expected:?}"
        )));
    }
    Ok(())
}

/// Surrogate objective over an arbitrary list of trajectories (any G ≥ 1).
pub fn surrogate_objective<S: Scalar>(
    trajectories: &[Trajectory<S>],
    advantages: &[S],
    new_logps: &[Vec<S>],
    ref_logps: Option<&[Vec<S>]>,
    cfg: &ObjectiveConfig<S>,
) -> Result<S, SurrogateError> {
    if advantages.len() != trajectories.len() {
        return Err(SurrogateError::Shape(format!(
            "{} advantages for {} trajectories",
            advantages.len(),
            trajectories.len()
        )));
    }
    if trajectories.is_empty() {
        return Ok(S::zero());
    }
    let shape: Vec<usize> = trajectories.iter().map(Trajectory::len).collect();
    check_shape("new_logps", &shape, new_logps)?;
    let beta = cfg.kl_weight();
    let refs = match (beta, ref_logps) {
        (Some(_), None) => return Err(SurrogateError::MissingReference),
        (Some(_), Some(r)) => {
            check_shape("ref_logps", &shape, r)?;
            Some(r)
        }
        (None, _) => None,
    };

    let mut total = S::zero();
    for (i, traj) in trajectories.iter().enumerate() {
        let mut seq = S::zero();
        for t in 0..traj.len() {
            let rho = importance_ratio(new_logps[i][t], traj.behavior_logps[t])?;
            let mut term = clipped_term(rho, advantages[i], &cfg.clip);
            if let (Some(beta), Some(refs)) = (beta, refs) {
                term = term - beta * kl_k3(new_logps[i][t], refs[i][t]);
            }
            seq = seq + term;
        }
        total = total + seq / S::from_count(traj.len());
    }
    Ok(total / S::from_count(trajectories.len()))
}

/// Objective of one rewarded group.
pub fn group_objective<S: Scalar>(
    group: &RewardedGroup<S>,
    advantages: &[S],
    new_logps: &[Vec<S>],
    ref_logps: Option<&[Vec<S>]>,
    cfg: &ObjectiveConfig<S>,
) -> Result<S, SurrogateError> {
    surrogate_objective(group.trajectories(), advantages, new_logps, ref_logps, cfg)
}

/// A rewarded group with its task and per-response advantages.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub task: &'a TaskSpec,
    pub group: &'a RewardedGroup<f64>,
    pub advantages: &'a [f64],
}

fn logps_under(
    policy: &PolicyParams,
    item: &BatchItem<'_>,
) -> Result<Vec<Vec<f64>>, SurrogateError> {
    item.group
        .trajectories()
        .iter()
        .map(|t| {
            policy
                .logprob(item.task, &t.tokens)
                .map_err(SurrogateError::from)
        })
        .collect()
}

/// Sum of group objectives with new log-probabilities taken from `policy`.
pub fn batch_objective(
    batch: &[BatchItem<'_>],
    policy: &PolicyParams,
    reference: Option<&PolicyParams>,
    cfg: &ObjectiveConfig<f64>,
) -> Result<f64, SurrogateError> {
    let mut total = 0.0;
    for item in ordered(batch) {
        let new = logps_under(policy, item)?;
        let refs = match reference {
            Some(r) if cfg.kl_weight().is_some() => Some(logps_under(r, item)?),
            _ => None,
        };
        total += group_objective(item.group, item.advantages, &new, refs.as_deref(), cfg)?;
    }
    Ok(total)
}

/// Batch items in reduction order: by task id, ties kept in batch order.
fn ordered<'b, 'a>(batch: &'b [BatchItem<'a>]) -> Vec<&'b BatchItem<'a>> {
    let mut items: Vec<&BatchItem<'a>> = batch.iter().collect();
    items.sort_by_key(|it| it.group.task_id());
    items
}

fn check_snapshot(item: &BatchItem<'_>, old: &PolicyParams) -> Result<(), SurrogateError> {
    for (response, traj) in item.group.trajectories().iter().enumerate() {
        let snap = old.logprob(item.task, &traj.tokens)?;
        for (position, (&stored, &snapshot)) in traj.behavior_logps.iter().zip(&snap).enumerate() {
            if (stored - snapshot).abs() > SNAPSHOT_TOL {
                return Err(SurrogateError::StaleSnapshot {
                    task_id: item.group.task_id(),
                    response,
                    position,
                    stored,
                    snapshot,
                });
            }
        }
    }
    Ok(())
}

fn group_gradient(
    item: &BatchItem<'_>,
    policy: &PolicyParams,
    old: &PolicyParams,
    reference: Option<&PolicyParams>,
    cfg: &ObjectiveConfig<f64>,
) -> Result<GradientTable, SurrogateError> {
    check_snapshot(item, old)?;
    let trajectories = item.group.trajectories();
    if item.advantages.len() != trajectories.len() {
        return Err(SurrogateError::Shape(format!(
            "{} advantages for {} trajectories",
            item.advantages.len(),
            trajectories.len()
        )));
    }
    let beta = cfg.kl_weight();
    if beta.is_some() && reference.is_none() {
        return Err(SurrogateError::MissingReference);
    }
    let vocab = policy.vocab();
    let group_weight = 1.0 / trajectories.len() as f64;
    let mut grad = GradientTable::new();

    for (traj, &adv) in trajectories.iter().zip(item.advantages) {
        let weight = group_weight / traj.len() as f64;
        for t in 0..traj.len() {
            let key = StateKey::new(item.task, &traj.tokens[..t]);
            let log_probs = policy.log_probs(&key);
            let tok = traj.tokens[t] as usize;
            let logp_new = log_probs[tok];
            let rho = importance_ratio(logp_new, traj.behavior_logps[t])?;
            // d(term)/d(logp_new)
            let mut dlogp = clipped_term_slope(rho, adv, &cfg.clip) * rho;
            if let (Some(beta), Some(r)) = (beta, reference) {
                let logp_ref = r.log_probs(&key)[tok];
                dlogp -= beta * kl_k3_slope(logp_new, logp_ref);
            }
            if dlogp == 0.0 {
                continue;
            }
            let coeff = weight * dlogp;
            let row = grad.row_mut(&key, vocab);
            for (v, g) in row.iter_mut().enumerate() {
                let indicator = if v == tok { 1.0 } else { 0.0 };
                *g += coeff * (indicator - log_probs[v].exp());
            }
        }
    }
    Ok(grad)
}

/// Analytic gradient of [`batch_objective`] with respect to every visited logit.
///
/// Uses `∂ log π(tok) / ∂ logit_v = 1{v = tok} - softmax_v`. Per-group
/// gradients may be computed in parallel; they are reduced in task-id order,
/// so the result does not depend on the worker count.
pub fn policy_gradient(
    batch: &[BatchItem<'_>],
    policy: &PolicyParams,
    old: &PolicyParams,
    reference: Option<&PolicyParams>,
    cfg: &ObjectiveConfig<f64>,
) -> Result<GradientTable, SurrogateError> {
    let items = ordered(batch);
    let partials: Vec<GradientTable> = items
        .par_iter()
        .map(|item| group_gradient(item, policy, old, reference, cfg))
        .collect::<Result<_, _>>()?;
    let mut total = GradientTable::new();
    for g in &partials {
        total.merge(g);
    }
    Ok(total)
}
