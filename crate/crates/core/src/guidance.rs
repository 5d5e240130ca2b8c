//! Logit fusion strategies.
//!
//! Every strategy is a pure function of the branch logits for one step:
//!
//! | strategy          | fused logits                                        |
//! |-------------------|-----------------------------------------------------|
//! | `none`            | `z_base`                                            |
//! | `fixed_contrast`  | `z_base + α (z_pos − z_neg)` with configurable roles |
//! | `lrm_guide_fixed` | `z_base + α (z_guide − z_negative)`                 |
//! | `stepwise`        | `(2 − αʳ) z_base + αʳ z_guide − z_negative`         |
//! | `vcd_ablation`    | `z_base + α (z_base − z_negative)`                  |
//! | `average_fusion`  | `(z_base + z_guide) / 2`                            |
//!
//! For `stepwise`, αʳ is the clipped Jensen–Shannon surplus
//! `JS(p_guide‖p_neg) − JS(p_base‖p_neg)`, capped at `warmup_slope · t`
//! during the first `warmup_steps` steps, and αᵖ = 1 − αʳ.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{js_divergence, softmax, LogitVector, NumericsError, ProbDist};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuidanceError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("alpha_r = {0} outside [0, 1]")]
    AlphaRange(f64),
    #[error("step index must start at 1")]
    StepIndex,
    #[error("invalid guidance config: {0}")]
    Config(String),
    #[error("strategy {strategy} needs the {branch} branch")]
    MissingBranch { strategy: Strategy, branch: Branch },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    FixedContrast,
    LrmGuideFixed,
    Stepwise,
    VcdAblation,
    AverageFusion,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::None,
        Strategy::FixedContrast,
        Strategy::LrmGuideFixed,
        Strategy::Stepwise,
        Strategy::VcdAblation,
        Strategy::AverageFusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::FixedContrast => "fixed_contrast",
            Strategy::LrmGuideFixed => "lrm_guide_fixed",
            Strategy::Stepwise => "stepwise",
            Strategy::VcdAblation => "vcd_ablation",
            Strategy::AverageFusion => "average_fusion",
        }
    }

    pub fn uses_fixed_alpha(self) -> bool {
        matches!(
            self,
            Strategy::FixedContrast | Strategy::LrmGuideFixed | Strategy::VcdAblation
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = GuidanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| GuidanceError::Config(format!("unknown strategy {s:?}")))
    }
}

/// The three logit streams of a decoding step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Base model with the omni payload.
    Base,
    /// Base model on the text prefix alone.
    Negative,
    /// Text-only reasoning guide.
    Guide,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Base => "base",
            Branch::Negative => "negative",
            Branch::Guide => "guide",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub strategy: Strategy,
    /// Weight for the fixed-α strategies.
    pub alpha: f64,
    pub warmup_steps: u32,
    pub warmup_slope: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Roles plugged into `fixed_contrast`.
    pub contrast_positive: Branch,
    pub contrast_negative: Branch,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Stepwise,
            alpha: 1.0,
            warmup_steps: 5,
            warmup_slope: 0.1,
            clip_lo: 0.0,
            clip_hi: 1.0,
            contrast_positive: Branch::Guide,
            contrast_negative: Branch::Negative,
        }
    }
}

impl GuidanceConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn fixed(strategy: Strategy, alpha: f64) -> Self {
        Self {
            strategy,
            alpha,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        let bad = |m: String| Err(GuidanceError::Config(m));
        if !self.alpha.is_finite() {
            return bad(format!("alpha must be finite, got {}", self.alpha));
        }
        if !(self.warmup_slope.is_finite() && self.warmup_slope >= 0.0) {
            return bad(format!("warmup_slope must be >= 0, got {}", self.warmup_slope));
        }
        if !(0.0 <= self.clip_lo && self.clip_lo <= self.clip_hi && self.clip_hi <= 1.0) {
            return bad(format!(
                "need 0 <= clip_lo <= clip_hi <= 1, got [{}, {}]",
                self.clip_lo, self.clip_hi
            ));
        }
        Ok(())
    }

    /// Branches the strategy reads, in evaluation order.
    pub fn branches(&self) -> Vec<Branch> {
        match self.strategy {
            Strategy::None => vec![Branch::Base],
            Strategy::FixedContrast => {
                let mut b = vec![Branch::Base];
                for role in [self.contrast_positive, self.contrast_negative] {
                    if !b.contains(&role) {
                        b.push(role);
                    }
                }
                b
            }
            Strategy::LrmGuideFixed | Strategy::Stepwise => {
                vec![Branch::Base, Branch::Negative, Branch::Guide]
            }
            Strategy::VcdAblation => vec![Branch::Base, Branch::Negative],
            Strategy::AverageFusion => vec![Branch::Base, Branch::Guide],
        }
    }

    pub fn needs_guide(&self) -> bool {
        self.branches().contains(&Branch::Guide)
    }
}

/// Per-step weights of the stepwise strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepWeights {
    pub alpha_r: f64,
    pub alpha_p: f64,
    pub d_r: f64,
    pub d_p: f64,
}

fn check_len(a: &LogitVector, b: &LogitVector) -> Result<(), GuidanceError> {
    if a.len() != b.len() {
        return Err(NumericsError::Dimension {
            left: a.len(),
            right: b.len(),
        }
        .into());
    }
    Ok(())
}

fn combine<const N: usize>(
    inputs: [&LogitVector; N],
    f: impl Fn([f64; N]) -> f64,
) -> Result<LogitVector, GuidanceError> {
    for other in &inputs[1..] {
        check_len(inputs[0], other)?;
    }
    let out = (0..inputs[0].len())
        .map(|i| f(inputs.map(|z| z[i])))
        .collect();
    Ok(LogitVector::new(out)?)
}

/// `z_base + α (z_pos − z_neg)`.
pub fn fixed_contrast(
    z_base: &LogitVector,
    z_pos: &LogitVector,
    z_neg: &LogitVector,
    alpha: f64,
) -> Result<LogitVector, GuidanceError> {
    combine([z_base, z_pos, z_neg], |[b, p, n]| b + alpha * (p - n))
}

/// Reasoner-guided contrast: the reasoner's logits are the positive role and
/// the text-only base logits the negative one.
pub fn lrm_guide_fixed(
    z_base: &LogitVector,
    z_guide: &LogitVector,
    z_neg: &LogitVector,
    alpha: f64,
) -> Result<LogitVector, GuidanceError> {
    fixed_contrast(z_base, z_guide, z_neg, alpha)
}

/// Reasoning weight for step `t` (1-based) from the three branch distributions.
pub fn stepwise_alpha(
    p_guide: &ProbDist,
    p_base: &ProbDist,
    p_neg: &ProbDist,
    t: usize,
    cfg: &GuidanceConfig,
) -> Result<StepWeights, GuidanceError> {
    if t == 0 {
        return Err(GuidanceError::StepIndex);
    }
    let d_r = js_divergence(p_guide, p_neg)?;
    let d_p = js_divergence(p_base, p_neg)?;
    let alpha_r = weight_from_divergences(d_r, d_p, t, cfg);
    Ok(StepWeights {
        alpha_r,
        alpha_p: 1.0 - alpha_r,
        d_r,
        d_p,
    })
}

/// Clipped surplus with the warmup cap.
pub fn weight_from_divergences(d_r: f64, d_p: f64, t: usize, cfg: &GuidanceConfig) -> f64 {
    let mut alpha_r = (d_r - d_p).clamp(cfg.clip_lo, cfg.clip_hi);
    if t <= cfg.warmup_steps as usize {
        alpha_r = alpha_r.min(cfg.warmup_slope * t as f64);
    }
    alpha_r
}

/// `(2 − αʳ) z_base + αʳ z_guide − z_neg`.
pub fn stepwise_mix(
    z_base: &LogitVector,
    z_guide: &LogitVector,
    z_neg: &LogitVector,
    alpha_r: f64,
) -> Result<LogitVector, GuidanceError> {
    if !(0.0..=1.0).contains(&alpha_r) {
        return Err(GuidanceError::AlphaRange(alpha_r));
    }
    combine([z_base, z_guide, z_neg], |[b, g, n]| {
        (2.0 - alpha_r) * b + alpha_r * g - n
    })
}

/// `z_base + α (z_base − z_neg)`: contrast against the modality-free branch.
pub fn vcd_ablation_mix(
    z_base: &LogitVector,
    z_neg: &LogitVector,
    alpha: f64,
) -> Result<LogitVector, GuidanceError> {
    combine([z_base, z_neg], |[b, n]| b + alpha * (b - n))
}

pub fn average_fusion(
    z_base: &LogitVector,
    z_guide: &LogitVector,
) -> Result<LogitVector, GuidanceError> {
    combine([z_base, z_guide], |[b, g]| 0.5 * (b + g))
}

/// Logits from each branch for one step. Absent branches are `None`.
#[derive(Debug, Clone, Copy)]
pub struct BranchLogits<'a> {
    pub base: &'a LogitVector,
    pub negative: Option<&'a LogitVector>,
    pub guide: Option<&'a LogitVector>,
}

impl<'a> BranchLogits<'a> {
    fn get(&self, branch: Branch, strategy: Strategy) -> Result<&'a LogitVector, GuidanceError> {
        match branch {
            Branch::Base => Some(self.base),
            Branch::Negative => self.negative,
            Branch::Guide => self.guide,
        }
        .ok_or(GuidanceError::MissingBranch { strategy, branch })
    }
}

/// Fused logits and the weights that produced them.
#[derive(Debug, Clone)]
pub struct Fused {
    pub logits: LogitVector,
    pub weights: StepWeights,
}

/// Apply the configured strategy at step `t`.
///
/// Fixed strategies report `alpha_r = α`, `alpha_p = 0` and zero divergences;
/// `average_fusion` reports `alpha_r = 0.5`.
pub fn fuse(
    cfg: &GuidanceConfig,
    t: usize,
    logits: BranchLogits<'_>,
) -> Result<Fused, GuidanceError> {
    let s = cfg.strategy;
    let fixed = |alpha_r: f64| StepWeights {
        alpha_r,
        alpha_p: 0.0,
        d_r: 0.0,
        d_p: 0.0,
    };
    let (fused, weights) = match s {
        Strategy::None => (logits.base.clone(), fixed(0.0)),
        Strategy::FixedContrast => (
            fixed_contrast(
                logits.base,
                logits.get(cfg.contrast_positive, s)?,
                logits.get(cfg.contrast_negative, s)?,
                cfg.alpha,
            )?,
            fixed(cfg.alpha),
        ),
        Strategy::LrmGuideFixed => (
            lrm_guide_fixed(
                logits.base,
                logits.get(Branch::Guide, s)?,
                logits.get(Branch::Negative, s)?,
                cfg.alpha,
            )?,
            fixed(cfg.alpha),
        ),
        Strategy::Stepwise => {
            let z_guide = logits.get(Branch::Guide, s)?;
            let z_neg = logits.get(Branch::Negative, s)?;
            // divergences on raw logits at temperature 1
            let w = stepwise_alpha(
                &softmax(z_guide),
                &softmax(logits.base),
                &softmax(z_neg),
                t,
                cfg,
            )?;
            (stepwise_mix(logits.base, z_guide, z_neg, w.alpha_r)?, w)
        }
        Strategy::VcdAblation => (
            vcd_ablation_mix(logits.base, logits.get(Branch::Negative, s)?, cfg.alpha)?,
            fixed(cfg.alpha),
        ),
        Strategy::AverageFusion => (
            average_fusion(logits.base, logits.get(Branch::Guide, s)?)?,
            fixed(0.5),
        ),
    };
    Ok(Fused {
        logits: fused,
        weights,
    })
}
