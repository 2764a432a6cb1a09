//! Pass@k evaluation: the unbiased estimator, Pass@k curves, and the
//! trapezoidal AUC over a uniform `log2(k)` axis.
//!
//! Values are fractions internally. File output (`passk.csv`, `eval.json`)
//! and printed AUCs are in percent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{RewardScale, TaskSpec};
use crate::policy::{PolicyError, PolicyParams, StateKey};
use crate::scalar::Scalar;
use crate::seeding::{stream, Purpose};
use crate::tasks::verify;

/// The k grid 1, 2, 4, ..., 256.
pub const DEFAULT_KS: [usize; 9] = [1, 2, 4, 8, 16, 32, 64, 128, 256];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("k = {k} must satisfy 1 <= k <= n = {n}")]
    BadK { n: usize, k: usize },
    #[error("success count c = {c} exceeds n = {n}")]
    BadCount { n: usize, c: usize },
    #[error("k grid must be non-empty and strictly increasing, got {0:?}")]
    BadGrid(Vec<usize>),
    #[error("k grid {0:?} is not the dyadic sequence 1, 2, 4, ...")]
    NotDyadic(Vec<usize>),
    #[error("{values} values for {ks} grid points")]
    LengthMismatch { ks: usize, values: usize },
    #[error("no problems to evaluate")]
    NoProblems,
    #[error("malformed passk CSV at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Unbiased Pass@k, `1 - C(n-c, k) / C(n, k)`, via the stable product form.
pub fn unbiased_pass_at_k<S: Scalar>(n: usize, c: usize, k: usize) -> Result<S, EvalError> {
    if k == 0 || k > n {
        return Err(EvalError::BadK { n, k });
    }
    if c > n {
        return Err(EvalError::BadCount { n, c });
    }
    if c > n - k {
        return Ok(S::one());
    }
    let miss = (0..k).fold(S::one(), |acc, i| {
        acc * S::from_count(n - c - i) / S::from_count(n - i)
    });
    Ok(S::one() - miss)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassAtKCurve<S> {
    pub ks: Vec<usize>,
    pub values: Vec<S>,
    /// Samples per problem (the smallest, if problems differ).
    pub n: usize,
    pub auc: S,
}

fn check_grid(ks: &[usize]) -> Result<(), EvalError> {
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadGrid(ks.to_vec()));
    }
    Ok(())
}

pub fn is_dyadic(ks: &[usize]) -> bool {
    !ks.is_empty()
        && ks
            .iter()
            .enumerate()
            .all(|(i, &k)| i < usize::BITS as usize && k == 1usize << i)
}

/// Trapezoidal mean over the uniform `log2(k)` axis for the grid 1, 2, 4, ...
///
/// Equals `[(v_0 + v_last)/2 + Σ interior] / (len - 1)`; a single-point grid
/// returns its only value.
pub fn auc_log2<S: Scalar>(ks: &[usize], values: &[S]) -> Result<S, EvalError> {
    if ks.len() != values.len() {
        return Err(EvalError::LengthMismatch {
            ks: ks.len(),
            values: values.len(),
        });
    }
    if !is_dyadic(ks) {
        return Err(EvalError::NotDyadic(ks.to_vec()));
    }
    let last = values.len() - 1;
    if last == 0 {
        return Ok(values[0]);
    }
    let ends = (values[0] + values[last]) / S::lit(2.0);
    let interior: S = values[1..last].iter().copied().sum();
    Ok((ends + interior) / S::from_count(last))
}

/// Trapezoid on a non-uniform `log2(k)` axis, normalized by the axis span.
pub fn auc_log_axis<S: Scalar>(ks: &[usize], values: &[S]) -> Result<S, EvalError> {
    if ks.len() != values.len() {
        return Err(EvalError::LengthMismatch {
            ks: ks.len(),
            values: values.len(),
        });
    }
    check_grid(ks)?;
    if ks.len() == 1 {
        return Ok(values[0]);
    }
    let x: Vec<S> = ks.iter().map(|&k| S::from_count(k).log2()).collect();
    let mut area = S::zero();
    for j in 0..ks.len() - 1 {
        area = area + (x[j + 1] - x[j]) * (values[j] + values[j + 1]) / S::lit(2.0);
    }
    Ok(area / (x[ks.len() - 1] - x[0]))
}

/// Mean unbiased Pass@k over problems for every k in `ks`.
pub fn pass_curve<S: Scalar>(
    problems: &[(usize, usize)],
    ks: &[usize],
) -> Result<PassAtKCurve<S>, EvalError> {
    if problems.is_empty() {
        return Err(EvalError::NoProblems);
    }
    check_grid(ks)?;
    let count = S::from_count(problems.len());
    let values = ks
        .iter()
        .map(|&k| {
            let mut total = S::zero();
            for &(n, c) in problems {
                total = total + unbiased_pass_at_k::<S>(n, c, k)?;
            }
            Ok(total / count)
        })
        .collect::<Result<Vec<S>, EvalError>>()?;
    let auc = if is_dyadic(ks) {
        auc_log2(ks, &values)?
    } else {
        auc_log_axis(ks, &values)?
    };
    let n = problems.iter().map(|p| p.0).min().unwrap_or(0);
    Ok(PassAtKCurve {
        ks: ks.to_vec(),
        values,
        n,
        auc,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemCount {
    pub task_id: u32,
    pub n: usize,
    pub c: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub curve: PassAtKCurve<f64>,
    pub per_problem: Vec<ProblemCount>,
}

/// Sample `n_samples` responses per task at `temperature` and build the curve.
///
/// Each task draws from its own stream derived from `(seed, task_id)`, so the
/// result does not depend on the worker count.
pub fn evaluate_policy(
    policy: &PolicyParams,
    suite: &[TaskSpec],
    n_samples: usize,
    temperature: f64,
    ks: &[usize],
    seed: u64,
    scale: &RewardScale<f64>,
) -> Result<Evaluation, EvalError> {
    check_grid(ks)?;
    let max_k = *ks.last().expect("grid checked non-empty");
    if max_k > n_samples {
        return Err(EvalError::BadK {
            n: n_samples,
            k: max_k,
        });
    }
    let per_problem = suite
        .par_iter()
        .map(|task| {
            let mut rng = stream(seed, Purpose::Eval, &[task.task_id as u64]);
            let mut c = 0;
            for _ in 0..n_samples {
                let s = policy.sample_trajectory(task, &mut rng, temperature)?;
                if scale.is_max(verify(task, &s.tokens, scale)) {
                    c += 1;
                }
            }
            Ok(ProblemCount {
                task_id: task.task_id,
                n: n_samples,
                c,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let pairs: Vec<(usize, usize)> = per_problem.iter().map(|p| (p.n, p.c)).collect();
    let curve = pass_curve(&pairs, ks)?;
    Ok(Evaluation { curve, per_problem })
}

/// Mean entropy (nats) of the first-token distribution over the suite.
pub fn mean_root_entropy(policy: &PolicyParams, suite: &[TaskSpec]) -> f64 {
    if suite.is_empty() {
        return 0.0;
    }
    suite
        .iter()
        .map(|t| policy.entropy(&StateKey::new(t, &[])))
        .sum::<f64>()
        / suite.len() as f64
}

/// `k,value` CSV with percent values to two decimals.
pub fn passk_csv<S: Scalar>(curve: &PassAtKCurve<S>) -> String {
    let mut out = String::from("k,value\n");
    for (k, v) in curve.ks.iter().zip(&curve.values) {
        out.push_str(&format!("{},{:.2}\n", k, v.as_f64() * 100.0));
    }
    out
}

/// Parse a `k,value` CSV; values are returned as written (percent).
pub fn parse_passk_csv(text: &str) -> Result<(Vec<usize>, Vec<f64>), EvalError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == "k,value" => {}
        Some((i, header)) => {
            return Err(EvalError::Csv {
                line: i + 1,
                msg: format!("expected header `k,value`, got `{header}`"),
            })
        }
        None => {
            return Err(EvalError::Csv {
                line: 1,
                msg: "empty file".into(),
            })
        }
    }
    let mut ks = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines {
        let bad = |msg: String| EvalError::Csv { line: i + 1, msg };
        let mut fields = line.split(',').map(str::trim);
        let (Some(k), Some(v), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(bad(format!("expected two fields, got `{line}`")));
        };
        ks.push(
            k.parse::<usize>()
                .map_err(|e| bad(format!("k `{k}`: {e}")))?,
        );
        let v = v
            .parse::<f64>()
            .map_err(|e| bad(format!("value `{v}`: {e}")))?;
        if !v.is_finite() {
            return Err(bad(format!("value `{v}` is not finite")));
        }
        values.push(v);
    }
    if ks.is_empty() {
        return Err(EvalError::Csv {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    Ok((ks, values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent.
    pub auc: f64,
    pub n: usize,
    pub ks: Vec<usize>,
    /// Percent.
    pub values: Vec<f64>,
    pub per_problem: Vec<ProblemCount>,
}

impl From<&Evaluation> for EvalReport {
    fn from(e: &Evaluation) -> Self {
        EvalReport {
            auc: e.curve.auc * 100.0,
            n: e.curve.n,
            ks: e.curve.ks.clone(),
            values: e.curve.values.iter().map(|v| v * 100.0).collect(),
            per_problem: e.per_problem.clone(),
        }
    }
}
