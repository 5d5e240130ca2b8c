//! Three-branch autoregressive decoding.
//!
//! Per step the decoder gathers logits from the omni-conditioned base branch,
//! the text-only negative branch and the text-only guide (whichever the
//! strategy needs), fuses them, samples one token and feeds that same token to
//! every open session. Branch calls within a step run concurrently and are
//! joined before fusion.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance::{fuse, Branch, BranchLogits, GuidanceConfig, GuidanceError, Strategy};
use crate::numerics::LogitVector;
use crate::report::StepTrace;
use crate::sampler::{Sampler, SamplerConfig, SamplerError};
use crate::source::{
    check_compatibility, prefill, LogitSource, PromptInput, Session, SourceError, TokenId,
    VocabMismatch,
};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 4096;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("strategy {0} requires a guide source")]
    MissingGuide(Strategy),
    #[error("guide vocabulary incompatible with base: {0}")]
    Incompatible(VocabMismatch),
    #[error("max_new_tokens must be >= 1")]
    ZeroBudget,
    #[error("repetitions must be >= 1")]
    ZeroRepetitions,
    #[error("no job with strategy `none` to use as latency baseline")]
    NoBaseline,
    #[error("{branch} branch: {source}")]
    Source { branch: Branch, source: SourceError },
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("job `{label}` failed: {message}")]
    JobFailed { label: String, message: String },
}

/// What the negative branch sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeInput {
    /// The text prefix with the modality removed.
    #[default]
    TextOnly,
    /// A content-destroyed copy of the payload of the same size, as in
    /// noise-based visual contrastive decoding.
    PerturbedOmni,
}

/// Everything needed to run one generation.
#[derive(Clone)]
pub struct DecodeJob {
    pub base: Arc<dyn LogitSource>,
    pub guide: Option<Arc<dyn LogitSource>>,
    pub prompt: PromptInput,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
    pub max_new_tokens: usize,
    pub stop_tokens: BTreeSet<TokenId>,
    /// Appended to the guide branch's prompt only.
    pub think_tag: Vec<TokenId>,
    pub negative_input: NegativeInput,
}

impl DecodeJob {
    pub fn new(base: Arc<dyn LogitSource>, prompt: PromptInput) -> Self {
        Self {
            base,
            guide: None,
            prompt,
            guidance: GuidanceConfig::default(),
            sampler: SamplerConfig::default(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            stop_tokens: BTreeSet::new(),
            think_tag: Vec::new(),
            negative_input: NegativeInput::TextOnly,
        }
    }

    pub fn with_guide(mut self, guide: Arc<dyn LogitSource>) -> Self {
        self.guide = Some(guide);
        self
    }

    pub fn with_guidance(mut self, guidance: GuidanceConfig) -> Self {
        self.guidance = guidance;
        self
    }

    pub fn with_sampler(mut self, sampler: SamplerConfig) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn with_max_new_tokens(mut self, n: usize) -> Self {
        self.max_new_tokens = n;
        self
    }

    pub fn with_stop_tokens<I: IntoIterator<Item = TokenId>>(mut self, stops: I) -> Self {
        self.stop_tokens = stops.into_iter().collect();
        self
    }

    pub fn with_think_tag(mut self, tag: Vec<TokenId>) -> Self {
        self.think_tag = tag;
        self
    }

    /// Decoding settings as JSON, used as the default trace config echo.
    pub fn settings_json(&self) -> serde_json::Value {
        serde_json::json!({
            "guidance": self.guidance,
            "sampler": self.sampler,
            "max_new_tokens": self.max_new_tokens,
            "stop_tokens": self.stop_tokens,
            "think_tag": self.think_tag,
            "negative_input": self.negative_input,
        })
    }

    fn branch_input(&self, branch: Branch) -> PromptInput {
        match branch {
            Branch::Base => self.prompt.clone(),
            Branch::Negative => match (self.negative_input, &self.prompt.omni) {
                (NegativeInput::PerturbedOmni, Some(p)) => {
                    PromptInput::with_omni(self.prompt.text_tokens.clone(), p.perturbed())
                }
                _ => self.prompt.text_only(),
            },
            Branch::Guide => {
                let mut tokens = self.prompt.text_tokens.clone();
                tokens.extend_from_slice(&self.think_tag);
                PromptInput::text(tokens)
            }
        }
    }

    fn branch_source(&self, branch: Branch) -> &Arc<dyn LogitSource> {
        match branch {
            Branch::Base | Branch::Negative => &self.base,
            Branch::Guide => self.guide.as_ref().expect("guide checked in validate"),
        }
    }

    fn validate(&self) -> Result<(), DecodeError> {
        self.guidance.validate()?;
        self.sampler.validate()?;
        if self.max_new_tokens == 0 {
            return Err(DecodeError::ZeroBudget);
        }
        if self.guidance.needs_guide() {
            let guide = self
                .guide
                .as_ref()
                .ok_or(DecodeError::MissingGuide(self.guidance.strategy))?;
            check_compatibility(self.base.vocabulary(), guide.vocabulary())
                .map_err(DecodeError::Incompatible)?;
        }
        for branch in self.guidance.branches() {
            let input = self.branch_input(branch);
            let source = self.branch_source(branch);
            let err = |source| DecodeError::Source { branch, source };
            if input.text_tokens.is_empty() {
                return Err(err(SourceError::EmptyPrompt));
            }
            if input.text_tokens.len() > source.context_limit() {
                return Err(err(SourceError::Capacity {
                    limit: source.context_limit(),
                    requested: input.text_tokens.len(),
                }));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    StopToken,
    LengthLimit,
    Error,
}

impl FinishReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FinishReason::StopToken => "stop_token",
            FinishReason::LengthLimit => "length_limit",
            FinishReason::Error => "error",
        }
    }
}

/// Start of a pipeline stage within a concatenated result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMarker {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BranchTiming {
    pub prefill_s: f64,
    /// Cumulative time spent in step calls.
    pub generate_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timings {
    /// Job start to first fused token.
    pub prefill_s: f64,
    /// Mean interval between consecutive tokens after the first.
    pub generate_mean_s: f64,
    pub generate_total_s: f64,
    pub intervals: usize,
    pub base: BranchTiming,
    pub negative: BranchTiming,
    pub guide: BranchTiming,
}

impl Timings {
    fn branch_mut(&mut self, b: Branch) -> &mut BranchTiming {
        match b {
            Branch::Base => &mut self.base,
            Branch::Negative => &mut self.negative,
            Branch::Guide => &mut self.guide,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub tokens: Vec<TokenId>,
    pub finish_reason: FinishReason,
    pub error: Option<String>,
    pub traces: Vec<StepTrace>,
    pub timings: Timings,
    pub stages: Vec<StageMarker>,
}

impl DecodeResult {
    /// Tokens of the named stage, or all tokens when there are no stages.
    pub fn stage_tokens(&self, name: &str) -> Option<&[TokenId]> {
        if self.stages.is_empty() {
            return Some(&self.tokens);
        }
        let s = self.stages.iter().find(|s| s.name == name)?;
        Some(&self.tokens[s.start..s.start + s.len])
    }

    pub fn is_error(&self) -> bool {
        self.finish_reason == FinishReason::Error
    }
}

struct Live {
    branch: Branch,
    session: Session,
}

type BranchCall = (Branch, Result<LogitVector, SourceError>, Duration);

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

type Prefilled = (Branch, Result<(Session, LogitVector), SourceError>, Duration);

fn prefill_all(job: &DecodeJob, branches: &[Branch]) -> Vec<Prefilled> {
    let run = |b: Branch| {
        let input = job.branch_input(b);
        let source = job.branch_source(b);
        let (r, d) = timed(|| prefill(source.as_ref(), &input));
        (b, r, d)
    };
    if branches.len() == 1 {
        return vec![run(branches[0])];
    }
    thread::scope(|s| {
        let handles: Vec<_> = branches.iter().map(|&b| s.spawn(move || run(b))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prefill worker panicked"))
            .collect()
    })
}

fn step_all(live: &mut [Live], token: TokenId) -> Vec<BranchCall> {
    if live.len() == 1 {
        let l = &mut live[0];
        let (r, d) = timed(|| l.session.step(token));
        return vec![(l.branch, r, d)];
    }
    thread::scope(|s| {
        let handles: Vec<_> = live
            .iter_mut()
            .map(|l| {
                s.spawn(move || {
                    let (r, d) = timed(|| l.session.step(token));
                    (l.branch, r, d)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("step worker panicked"))
            .collect()
    })
}

fn close_all(live: &mut [Live]) {
    for l in live {
        if let Err(e) = l.session.close() {
            log::warn!("closing {} session: {e}", l.branch);
        }
    }
}

#[derive(Default)]
struct StepLogits {
    base: Option<LogitVector>,
    negative: Option<LogitVector>,
    guide: Option<LogitVector>,
    lat: [f64; 3],
}

impl StepLogits {
    fn set(&mut self, b: Branch, z: LogitVector, d: Duration) {
        let ms = d.as_secs_f64() * 1e3;
        match b {
            Branch::Base => {
                self.base = Some(z);
                self.lat[0] = ms;
            }
            Branch::Negative => {
                self.negative = Some(z);
                self.lat[1] = ms;
            }
            Branch::Guide => {
                self.guide = Some(z);
                self.lat[2] = ms;
            }
        }
    }
}

/// Run one generation. Precondition failures are returned as `Err`; branch
/// failures during generation end the job early with
/// [`FinishReason::Error`] and whatever tokens were produced so far.
pub fn decode(job: &DecodeJob) -> Result<DecodeResult, DecodeError> {
    job.validate()?;
    let branches = job.guidance.branches();
    let vocab = job.base.vocabulary().clone();
    let mut sampler = Sampler::new(job.sampler.clone());
    let mut history: Vec<TokenId> = if job.sampler.penalize_prompt {
        job.prompt.text_tokens.clone()
    } else {
        Vec::new()
    };

    let mut result = DecodeResult {
        tokens: Vec::new(),
        finish_reason: FinishReason::Error,
        error: None,
        traces: Vec::new(),
        timings: Timings::default(),
        stages: Vec::new(),
    };

    let start = Instant::now();
    let mut live = Vec::with_capacity(branches.len());
    let mut step = StepLogits::default();
    let mut failure = None;
    for (branch, r, d) in prefill_all(job, &branches) {
        result.timings.branch_mut(branch).prefill_s = d.as_secs_f64();
        match r {
            Ok((session, logits)) => {
                step.set(branch, logits, d);
                live.push(Live { branch, session });
            }
            Err(e) => {
                failure.get_or_insert(format!("{branch} branch prefill: {e}"));
            }
        }
    }
    if let Some(msg) = failure {
        close_all(&mut live);
        result.error = Some(msg);
        return Ok(result);
    }

    let mut last_emit = start;
    let mut t = 1;
    loop {
        let base = step.base.as_ref().expect("base branch always evaluated");
        let fused = match fuse(
            &job.guidance,
            t,
            BranchLogits {
                base,
                negative: step.negative.as_ref(),
                guide: step.guide.as_ref(),
            },
        ) {
            Ok(f) => f,
            Err(e) => {
                close_all(&mut live);
                result.error = Some(e.to_string());
                return Ok(result);
            }
        };
        let token = sampler.sample(&fused.logits, &history);
        let now = Instant::now();
        if t == 1 {
            result.timings.prefill_s = (now - start).as_secs_f64();
        } else {
            result.timings.generate_total_s += (now - last_emit).as_secs_f64();
            result.timings.intervals += 1;
        }
        last_emit = now;

        let w = fused.weights;
        result.traces.push(StepTrace {
            t,
            token_id: token,
            token: vocab.token_str(token).map(str::to_string),
            alpha_r: w.alpha_r,
            alpha_p: w.alpha_p,
            d_r: w.d_r,
            d_p: w.d_p,
            lat_base_ms: step.lat[0],
            lat_neg_ms: step.lat[1],
            lat_guide_ms: step.lat[2],
        });
        result.tokens.push(token);
        history.push(token);

        if job.stop_tokens.contains(&token) {
            result.finish_reason = FinishReason::StopToken;
            break;
        }
        if result.tokens.len() >= job.max_new_tokens {
            result.finish_reason = FinishReason::LengthLimit;
            break;
        }

        step = StepLogits::default();
        let mut failure = None;
        for (branch, r, d) in step_all(&mut live, token) {
            result.timings.branch_mut(branch).generate_s += d.as_secs_f64();
            match r {
                Ok(z) => step.set(branch, z, d),
                Err(e) => {
                    failure.get_or_insert(format!("{branch} branch step {}: {e}", t + 1));
                }
            }
        }
        if let Some(msg) = failure {
            result.error = Some(msg);
            break;
        }
        t += 1;
    }
    close_all(&mut live);
    if result.timings.intervals > 0 {
        result.timings.generate_mean_s =
            result.timings.generate_total_s / result.timings.intervals as f64;
    }
    Ok(result)
}

/// Settings for the first stage of [`caption_then_answer`].
#[derive(Debug, Clone)]
pub struct CaptionOptions {
    /// Instruction given to the base model together with the payload.
    pub prompt: Vec<TokenId>,
    pub max_new_tokens: usize,
    pub stop_tokens: BTreeSet<TokenId>,
}

/// Two-stage baseline: the base model describes the payload, then the guide
/// answers from that description plus the question (`job.prompt`'s text).
pub fn caption_then_answer(job: &DecodeJob, caption: &CaptionOptions) -> Result<DecodeResult, DecodeError> {
    let guide = job
        .guide
        .clone()
        .ok_or(DecodeError::MissingGuide(job.guidance.strategy))?;
    let none = GuidanceConfig {
        strategy: Strategy::None,
        ..job.guidance.clone()
    };
    let stage1 = DecodeJob {
        base: Arc::clone(&job.base),
        guide: None,
        prompt: PromptInput {
            text_tokens: caption.prompt.clone(),
            omni: job.prompt.omni.clone(),
        },
        guidance: none.clone(),
        sampler: job.sampler.clone(),
        max_new_tokens: caption.max_new_tokens,
        stop_tokens: caption.stop_tokens.clone(),
        think_tag: Vec::new(),
        negative_input: NegativeInput::TextOnly,
    };
    let first = decode(&stage1)?;
    let caption_marker = StageMarker {
        name: "caption".into(),
        start: 0,
        len: first.tokens.len(),
    };
    if first.is_error() {
        return Ok(DecodeResult {
            stages: vec![caption_marker],
            ..first
        });
    }

    let caption_text: Vec<TokenId> = first
        .tokens
        .iter()
        .copied()
        .filter(|t| !caption.stop_tokens.contains(t))
        .collect();
    let mut answer_prompt = caption_text;
    answer_prompt.extend_from_slice(&job.prompt.text_tokens);
    answer_prompt.extend_from_slice(&job.think_tag);
    let stage2 = DecodeJob {
        base: guide,
        guide: None,
        prompt: PromptInput::text(answer_prompt),
        guidance: none,
        sampler: job.sampler.clone(),
        max_new_tokens: job.max_new_tokens,
        stop_tokens: job.stop_tokens.clone(),
        think_tag: Vec::new(),
        negative_input: NegativeInput::TextOnly,
    };
    let second = decode(&stage2)?;

    let mut tokens = first.tokens;
    let answer_start = tokens.len();
    tokens.extend_from_slice(&second.tokens);
    let mut traces = first.traces;
    traces.extend(second.traces);
    let mut timings = second.timings.clone();
    timings.prefill_s += first.timings.prefill_s + first.timings.generate_total_s;
    timings.guide = second.timings.base;
    timings.base = first.timings.base;
    Ok(DecodeResult {
        tokens,
        finish_reason: second.finish_reason,
        error: second.error,
        traces,
        timings,
        stages: vec![
            caption_marker,
            StageMarker {
                name: "answer".into(),
                start: answer_start,
                len: second.tokens.len(),
            },
        ],
    })
}

/// A labelled job for [`bench`].
#[derive(Clone)]
pub struct BenchJob {
    pub label: String,
    pub job: DecodeJob,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub label: String,
    pub strategy: Strategy,
    pub mean_prefill_s: f64,
    pub mean_generate_s: f64,
    pub prefill_ratio: f64,
    pub generate_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub repetitions: usize,
    pub baseline: String,
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    pub fn row(&self, label: &str) -> Option<&LatencyRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Plain-text table with `(N.NN×)` ratio columns.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<24} {:<16} {:>20} {:>20}\n",
            "job", "strategy", "prefill", "generate/token"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:<16} {:>11.4}s ({:.2}×) {:>11.4}s ({:.2}×)\n",
                r.label, r.strategy.as_str(), r.mean_prefill_s, r.prefill_ratio, r.mean_generate_s, r.generate_ratio
            ));
        }
        out
    }
}

/// Mean prefill and per-token generate latency per job, with ratios against
/// the first job whose strategy is `none`.
pub fn bench(jobs: &[BenchJob], repetitions: usize) -> Result<LatencyReport, DecodeError> {
    if repetitions == 0 {
        return Err(DecodeError::ZeroRepetitions);
    }
    let baseline = jobs
        .iter()
        .position(|j| j.job.guidance.strategy == Strategy::None)
        .ok_or(DecodeError::NoBaseline)?;
    let mut means = Vec::with_capacity(jobs.len());
    for bj in jobs {
        let (mut prefill, mut generate, mut gen_n) = (0.0, 0.0, 0usize);
        for _ in 0..repetitions {
            let r = decode(&bj.job)?;
            if let Some(message) = r.error {
                return Err(DecodeError::JobFailed {
                    label: bj.label.clone(),
                    message,
                });
            }
            prefill += r.timings.prefill_s;
            if r.timings.intervals > 0 {
                generate += r.timings.generate_mean_s;
                gen_n += 1;
            }
        }
        let mean_gen = if gen_n > 0 { generate / gen_n as f64 } else { 0.0 };
        means.push((prefill / repetitions as f64, mean_gen));
    }
    let (bp, bg) = means[baseline];
    let ratio = |x: f64, b: f64| if b > 0.0 { x / b } else if x == b { 1.0 } else { f64::INFINITY };
    Ok(LatencyReport {
        repetitions,
        baseline: jobs[baseline].label.clone(),
        rows: jobs
            .iter()
            .zip(&means)
            .map(|(bj, &(p, g))| LatencyRow {
                label: bj.label.clone(),
                strategy: bj.job.guidance.strategy,
                mean_prefill_s: p,
                mean_generate_s: g,
                prefill_ratio: ratio(p, bp),
                generate_ratio: ratio(g, bg),
            })
            .collect(),
    })
}
