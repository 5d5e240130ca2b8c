//! Distribution arithmetic in double precision.
//!
//! Softmax uses max-subtraction, divergences use natural logarithms and the
//! `0 · ln 0 = 0` convention. Everything here is a pure function.

use std::ops::Index;

use thiserror::Error;

/// Logarithm base used by every divergence in this crate. Recorded in trace
/// headers so downstream tooling can rescale.
pub const DIVERGENCE_LOG_BASE: &str = "e";

/// Tolerance applied when validating that a distribution sums to one.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    Dimension { left: usize, right: usize },
    #[error("empty vector")]
    Empty,
    #[error("negative probability {value} at index {index}")]
    NegativeMass { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },
}

/// Unnormalized next-token scores for one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    /// Builds a logit vector, rejecting empty input and NaN/inf entries.
    pub fn new(scores: Vec<f64>) -> Result<Self, NumericsError> {
        if scores.is_empty() {
            return Err(NumericsError::Empty);
        }
        if let Some((index, &value)) = scores.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(NumericsError::NonFinite { index, value });
        }
        Ok(Self(scores))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest score; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl Index<usize> for LogitVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A normalized distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    /// Validates non-negativity and unit mass (within [`PROB_SUM_TOLERANCE`]).
    pub fn new(probs: Vec<f64>) -> Result<Self, NumericsError> {
        if probs.is_empty() {
            return Err(NumericsError::Empty);
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() {
                return Err(NumericsError::NonFinite { index, value });
            }
            if value < 0.0 {
                return Err(NumericsError::NegativeMass { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(NumericsError::NotNormalized { sum });
        }
        Ok(Self(probs))
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, NumericsError> {
        let sum: f64 = weights.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(NumericsError::NotNormalized { sum });
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Index<usize> for ProbDist {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax over raw scores.
pub fn softmax_slice(z: &[f64]) -> Result<ProbDist, NumericsError> {
    if z.is_empty() {
        return Err(NumericsError::Empty);
    }
    if let Some((index, &value)) = z.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(NumericsError::NonFinite { index, value });
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    // the max entry contributes exp(0) = 1, so the sum is at least 1
    let sum: f64 = exps.iter().sum();
    Ok(ProbDist(exps.into_iter().map(|e| e / sum).collect()))
}

pub fn softmax(z: &LogitVector) -> ProbDist {
    softmax_slice(z.as_slice()).expect("LogitVector entries are finite and non-empty")
}

fn check_dims(a: usize, b: usize) -> Result<(), NumericsError> {
    if a != b {
        return Err(NumericsError::Dimension { left: a, right: b });
    }
    Ok(())
}

/// `Σ p_i ln(p_i / q_i)`. Returns `+∞` when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64, NumericsError> {
    check_dims(p.len(), q.len())?;
    Ok(kl_terms(p.as_slice(), q.as_slice()))
}

fn kl_terms(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return f64::INFINITY;
            }
            acc += pi * (pi / qi).ln();
        }
    }
    acc.max(0.0)
}

/// Jensen–Shannon divergence in nats, bounded by `ln 2`.
///
/// Each term is accumulated as `p_i ln(2 p_i / (p_i + q_i))` so the mixture
/// never has to be materialized and symmetric inputs yield bit-identical
/// results regardless of argument order.
pub fn js_divergence(p: &ProbDist, q: &ProbDist) -> Result<f64, NumericsError> {
    check_dims(p.len(), q.len())?;
    let mut acc = 0.0;
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice()) {
        let m = pi + qi;
        if m <= 0.0 {
            continue;
        }
        // sum the pair in a fixed order so JS(p,q) == JS(q,p) exactly
        let (a, b) = if pi <= qi { (pi, qi) } else { (qi, pi) };
        let term_a = if a > 0.0 { a * (2.0 * a / m).ln() } else { 0.0 };
        let term_b = if b > 0.0 { b * (2.0 * b / m).ln() } else { 0.0 };
        acc += term_a + term_b;
    }
    Ok((0.5 * acc).clamp(0.0, std::f64::consts::LN_2))
}
