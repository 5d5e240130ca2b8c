//! Token selection from fused logits.
//!
//! Pipeline: repetition penalty → temperature → softmax → nucleus filter →
//! draw (or argmax in greedy mode). Ties resolve to the lowest token id.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{argmax, softmax_slice, LogitVector, ProbDist};
use crate::source::TokenId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub mode: SamplingMode,
    pub seed: u64,
    /// Whether prompt tokens count towards the repetition history.
    pub penalize_prompt: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            top_p: 0.95,
            repetition_penalty: 1.03,
            mode: SamplingMode::Sample,
            seed: 0,
            penalize_prompt: true,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            mode: SamplingMode::Greedy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(SamplerError::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(SamplerError::Config(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if !(self.repetition_penalty.is_finite() && self.repetition_penalty >= 1.0) {
            return Err(SamplerError::Config(format!(
                "repetition_penalty must be >= 1, got {}",
                self.repetition_penalty
            )));
        }
        Ok(())
    }
}

/// Divide positive logits of seen tokens by `penalty`, multiply the others.
/// Each distinct token is penalized once; ids outside the vocabulary are ignored.
pub fn apply_repetition_penalty(z: &LogitVector, history: &[TokenId], penalty: f64) -> LogitVector {
    if penalty == 1.0 || history.is_empty() {
        return z.clone();
    }
    let mut out = z.as_slice().to_vec();
    let mut seen = vec![false; out.len()];
    for &t in history {
        let i = t as usize;
        if i < out.len() && !seen[i] {
            seen[i] = true;
            out[i] = if out[i] > 0.0 { out[i] / penalty } else { out[i] * penalty };
        }
    }
    LogitVector::new(out).expect("penalty keeps logits finite")
}

/// Keep the smallest highest-probability prefix whose mass reaches `top_p`.
pub fn top_p_filter(p: &ProbDist, top_p: f64) -> ProbDist {
    if top_p >= 1.0 {
        return p.clone();
    }
    let probs = p.as_slice();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable sort keeps the lowest id first among equal probabilities
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut kept = vec![0.0; probs.len()];
    let mut cum = 0.0;
    for &i in &order {
        kept[i] = probs[i];
        cum += probs[i];
        if cum >= top_p {
            break;
        }
    }
    ProbDist::from_weights(kept).expect("top token always survives")
}

fn scaled(z: &LogitVector, cfg: &SamplerConfig, history: &[TokenId]) -> Vec<f64> {
    let penalized = apply_repetition_penalty(z, history, cfg.repetition_penalty);
    penalized
        .as_slice()
        .iter()
        .map(|&v| v / cfg.temperature)
        .collect()
}

/// The distribution a draw is taken from after the whole pipeline.
pub fn sampling_distribution(
    z: &LogitVector,
    cfg: &SamplerConfig,
    history: &[TokenId],
) -> ProbDist {
    let p = softmax_slice(&scaled(z, cfg, history)).expect("finite after scaling");
    top_p_filter(&p, cfg.top_p)
}

/// Select the next token. Greedy mode never touches `rng`.
pub fn sample_token<R: Rng + ?Sized>(
    z: &LogitVector,
    cfg: &SamplerConfig,
    history: &[TokenId],
    rng: &mut R,
) -> TokenId {
    if cfg.mode == SamplingMode::Greedy {
        return argmax(&scaled(z, cfg, history)) as TokenId;
    }
    let p = sampling_distribution(z, cfg, history);
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &pi) in p.as_slice().iter().enumerate() {
        if pi > 0.0 {
            cum += pi;
            last = i;
            if u < cum {
                return i as TokenId;
            }
        }
    }
    last as TokenId
}

/// Seeded sampler owned by one decode job.
pub struct Sampler {
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self { cfg, rng }
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn sample(&mut self, z: &LogitVector, history: &[TokenId]) -> TokenId {
        sample_token(z, &self.cfg, history, &mut self.rng)
    }
}
