//! Tabular autoregressive softmax policy over a small vocabulary.
//!
//! Each state is `(task context, emitted prefix)`. States never written to
//! behave as all-zero logits (uniform), so reading never mutates the table.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{TaskSpec, Token};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("temperature must be a finite value > 0, got {0}")]
    BadTemperature(f64),
    #[error("learning rate must be a finite value > 0, got {0}")]
    BadLearningRate(f64),
    #[error("non-finite gradient entry at state {key:?}, token {token}")]
    NonFiniteGradient { key: StateKey, token: usize },
    #[error("non-finite logit at state {key:?}, token {token}")]
    NonFiniteLogit { key: StateKey, token: usize },
    #[error("state {key:?} has {got} entries, vocabulary size is {vocab}")]
    WidthMismatch {
        key: StateKey,
        got: usize,
        vocab: usize,
    },
    #[error("state {key:?} is unreachable (prefix length must be < {max_len}, tokens < {vocab})")]
    Unreachable {
        key: StateKey,
        max_len: usize,
        vocab: usize,
    },
    #[error("expected {expected} tokens, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("vocabulary size must be >= 2 and max length >= 1 (got V={vocab}, L_max={max_len})")]
    BadShape { vocab: usize, max_len: usize },
}

/// A policy state: the prompt context plus the tokens emitted so far.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateKey {
    pub context: Vec<u32>,
    pub prefix: Vec<Token>,
}

impl StateKey {
    pub fn new(task: &TaskSpec, prefix: &[Token]) -> Self {
        StateKey {
            context: task.context.clone(),
            prefix: prefix.to_vec(),
        }
    }
}

/// Sparse per-state logit gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientTable {
    entries: BTreeMap<StateKey, Vec<f64>>,
}

impl GradientTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add `value` to the gradient of logit `token` at `key`.
    pub fn add(&mut self, key: &StateKey, vocab: usize, token: usize, value: f64) {
        let row = self.row_mut(key, vocab);
        row[token] += value;
    }

    pub fn row_mut(&mut self, key: &StateKey, vocab: usize) -> &mut Vec<f64> {
        if !self.entries.contains_key(key) {
            self.entries.insert(key.clone(), vec![0.0; vocab]);
        }
        self.entries.get_mut(key).expect("row inserted above")
    }

    pub fn get(&self, key: &StateKey) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateKey, &[f64])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Accumulate `other` into `self`, row by row in key order.
    pub fn merge(&mut self, other: &GradientTable) {
        for (key, row) in &other.entries {
            let dst = self.row_mut(key, row.len());
            for (d, s) in dst.iter_mut().zip(row) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.entries.values_mut() {
            for g in row.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.values().flatten().all(|&g| g == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flatten()
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Shannon entropy in nats of `softmax(logits)`.
pub fn entropy_of(logits: &[f64]) -> f64 {
    log_softmax(logits)
        .into_iter()
        .map(|lp| if lp.is_finite() { -lp.exp() * lp } else { 0.0 })
        .sum()
}

/// A sampled response before verification.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledResponse {
    pub tokens: Vec<Token>,
    /// Log-probabilities at temperature 1 of the sampled tokens.
    pub logps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: usize,
    max_len: usize,
    logits: BTreeMap<StateKey, Vec<f64>>,
}

impl PolicyParams {
    /// Uniform policy: no stored states.
    pub fn uniform(vocab: usize, max_len: usize) -> Result<Self, PolicyError> {
        if vocab < 2 || max_len < 1 {
            return Err(PolicyError::BadShape { vocab, max_len });
        }
        Ok(PolicyParams {
            vocab,
            max_len,
            logits: BTreeMap::new(),
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn state_count(&self) -> usize {
        self.logits.len()
    }

    pub fn states(&self) -> impl Iterator<Item = (&StateKey, &[f64])> {
        self.logits.iter().map(|(k, v)| (k, v.as_slice()))
    }

    fn check_key(&self, key: &StateKey) -> Result<(), PolicyError> {
        if key.prefix.len() >= self.max_len || key.prefix.iter().any(|&t| t as usize >= self.vocab)
        {
            return Err(PolicyError::Unreachable {
                key: key.clone(),
                max_len: self.max_len,
                vocab: self.vocab,
            });
        }
        Ok(())
    }

    /// Overwrite the logits of one state.
    pub fn set_logits(&mut self, key: StateKey, logits: Vec<f64>) -> Result<(), PolicyError> {
        self.check_key(&key)?;
        if logits.len() != self.vocab {
            return Err(PolicyError::WidthMismatch {
                key,
                got: logits.len(),
                vocab: self.vocab,
            });
        }
        if let Some(token) = logits.iter().position(|l| !l.is_finite()) {
            return Err(PolicyError::NonFiniteLogit { key, token });
        }
        self.logits.insert(key, logits);
        Ok(())
    }

    /// Logits at `key`, all-zero when the state has never been written.
    pub fn logits(&self, key: &StateKey) -> Vec<f64> {
        self.logits
            .get(key)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab])
    }

    pub fn stored_logits(&self, key: &StateKey) -> Option<&[f64]> {
        self.logits.get(key).map(Vec::as_slice)
    }

    /// Token probabilities at temperature 1.
    pub fn probs(&self, key: &StateKey) -> Vec<f64> {
        match self.logits.get(key) {
            Some(l) => softmax(l),
            None => vec![1.0 / self.vocab as f64; self.vocab],
        }
    }

    pub fn log_probs(&self, key: &StateKey) -> Vec<f64> {
        match self.logits.get(key) {
            Some(l) => log_softmax(l),
            None => vec![-(self.vocab as f64).ln(); self.vocab],
        }
    }

    pub fn entropy(&self, key: &StateKey) -> f64 {
        match self.logits.get(key) {
            Some(l) => entropy_of(l),
            None => (self.vocab as f64).ln(),
        }
    }

    /// Draw `len(task.answer)` tokens from `softmax(logits / temperature)`.
    ///
    /// Stored log-probabilities are always at temperature 1, so importance
    /// ratios computed from them are exact for training rollouts.
    pub fn sample_trajectory<R: Rng + ?Sized>(
        &self,
        task: &TaskSpec,
        rng: &mut R,
        temperature: f64,
    ) -> Result<SampledResponse, PolicyError> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(PolicyError::BadTemperature(temperature));
        }
        let len = task.answer_len();
        let mut tokens = Vec::with_capacity(len);
        let mut logps = Vec::with_capacity(len);
        for _ in 0..len {
            let key = StateKey::new(task, &tokens);
            let logits = self.logits(&key);
            let probs = if temperature == 1.0 {
                softmax(&logits)
            } else {
                let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
                softmax(&scaled)
            };
            let token = draw(&probs, rng.gen::<f64>());
            logps.push(log_softmax(&logits)[token]);
            tokens.push(token as Token);
        }
        Ok(SampledResponse { tokens, logps })
    }

    /// Per-position temperature-1 log-probabilities of `tokens` for `task`.
    pub fn logprob(&self, task: &TaskSpec, tokens: &[Token]) -> Result<Vec<f64>, PolicyError> {
        if tokens.len() != task.answer_len() {
            return Err(PolicyError::LengthMismatch {
                expected: task.answer_len(),
                got: tokens.len(),
            });
        }
        Ok((0..tokens.len())
            .map(|t| {
                let key = StateKey::new(task, &tokens[..t]);
                self.log_probs(&key)[tokens[t] as usize]
            })
            .collect())
    }

    /// Gradient ascent step `logits += lr * grad` on every touched state.
    ///
    /// The whole table is validated before any state is modified.
    pub fn apply_update(&mut self, grad: &GradientTable, lr: f64) -> Result<(), PolicyError> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(PolicyError::BadLearningRate(lr));
        }
        for (key, row) in grad.iter() {
            self.check_key(key)?;
            if row.len() != self.vocab {
                return Err(PolicyError::WidthMismatch {
                    key: key.clone(),
                    got: row.len(),
                    vocab: self.vocab,
                });
            }
            if let Some(token) = row.iter().position(|g| !g.is_finite()) {
                return Err(PolicyError::NonFiniteGradient {
                    key: key.clone(),
                    token,
                });
            }
        }
        for (key, row) in grad.iter() {
            if row.iter().all(|&g| g == 0.0) {
                continue;
            }
            let dst = self
                .logits
                .entry(key.clone())
                .or_insert_with(|| vec![0.0; row.len()]);
            for (l, g) in dst.iter_mut().zip(row) {
                *l += lr * g;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PolicyFile::from(self)).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyLoadError> {
        let file: PolicyFile = serde_json::from_str(text)?;
        let mut params = PolicyParams::uniform(file.vocab, file.max_len)?;
        for state in file.states {
            params.set_logits(state.key, state.logits)?;
        }
        Ok(params)
    }
}

/// Inverse-CDF draw; falls back to the last token with positive mass when
/// rounding leaves `u` above the accumulated total.
fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

#[derive(Debug, Error)]
pub enum PolicyLoadError {
    #[error("malformed policy JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] PolicyError),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    #[serde(rename = "V")]
    vocab: usize,
    #[serde(rename = "L_max")]
    max_len: usize,
    states: Vec<StateRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRecord {
    key: StateKey,
    logits: Vec<f64>,
}

impl From<&PolicyParams> for PolicyFile {
    fn from(p: &PolicyParams) -> Self {
        PolicyFile {
            vocab: p.vocab,
            max_len: p.max_len,
            states: p
                .logits
                .iter()
                .map(|(key, logits)| StateRecord {
                    key: key.clone(),
                    logits: logits.clone(),
                })
                .collect(),
        }
    }
}
