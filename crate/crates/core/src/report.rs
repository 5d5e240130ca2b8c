//! Traces, attribution rendering, α histograms and answer extraction.
//!
//! Trace files are line-delimited JSON: one header object (`"kind":"header"`)
//! followed by one [`StepTrace`] object per generated token.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decoder::{DecodeJob, DecodeResult, StageMarker};
use crate::numerics::DIVERGENCE_LOG_BASE;
use crate::source::TokenId;

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("bins must be >= 1")]
    Bins,
    #[error("predictions ({predictions}) and gold labels ({gold}) are not aligned")]
    Misaligned { predictions: usize, gold: usize },
}

/// One generated token and the weights that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepTrace {
    pub t: usize,
    pub token_id: TokenId,
    pub token: Option<String>,
    pub alpha_r: f64,
    pub alpha_p: f64,
    pub d_r: f64,
    pub d_p: f64,
    pub lat_base_ms: f64,
    pub lat_neg_ms: f64,
    pub lat_guide_ms: f64,
}

/// First record of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub kind: String,
    pub format_version: u32,
    pub strategy: String,
    pub seed: u64,
    pub log_base: String,
    pub config_fingerprint: String,
    pub finish_reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub tokens: usize,
    #[serde(default)]
    pub stages: Vec<StageMarker>,
    pub prefill_time_s: f64,
    pub generate_time_s: f64,
    /// Effective configuration of the run.
    pub config: serde_json::Value,
}

pub fn fingerprint_json(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("json values serialize");
    hex::encode(Sha256::digest(&bytes))
}

impl TraceHeader {
    /// Header carrying an explicit configuration echo.
    pub fn new(result: &DecodeResult, strategy: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            kind: "header".into(),
            format_version: TRACE_FORMAT_VERSION,
            strategy: strategy.to_string(),
            seed,
            log_base: DIVERGENCE_LOG_BASE.into(),
            config_fingerprint: fingerprint_json(&config),
            finish_reason: result.finish_reason.as_str().to_string(),
            error: result.error.clone(),
            tokens: result.tokens.len(),
            stages: result.stages.clone(),
            prefill_time_s: result.timings.prefill_s,
            generate_time_s: result.timings.generate_mean_s,
            config,
        }
    }

    /// Header whose configuration echo is the job's decoding settings.
    pub fn for_job(job: &DecodeJob, result: &DecodeResult) -> Self {
        Self::new(
            result,
            job.guidance.strategy.as_str(),
            job.sampler.seed,
            job.settings_json(),
        )
    }
}

pub fn write_traces<W: Write>(
    mut w: W,
    header: &TraceHeader,
    traces: &[StepTrace],
) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Write a trace file to `path`.
pub fn emit_traces(result: &DecodeResult, header: &TraceHeader, path: &Path) -> Result<(), ReportError> {
    let io = |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    write_traces(BufWriter::new(file), header, &result.traces).map_err(io)
}

pub fn read_traces<R: BufRead>(r: R, path: &Path) -> Result<(TraceHeader, Vec<StepTrace>), ReportError> {
    let mut lines = r.lines().enumerate();
    let format = |line: usize, message: String| ReportError::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let io = |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    };
    let (_, first) = lines.next().ok_or_else(|| format(1, "empty trace file".into()))?;
    let header: TraceHeader =
        serde_json::from_str(&first.map_err(io)?).map_err(|e| format(1, e.to_string()))?;
    if header.kind != "header" {
        return Err(format(1, "first record is not a header".into()));
    }
    let mut traces = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        traces.push(serde_json::from_str(&line).map_err(|e| format(i + 1, e.to_string()))?);
    }
    Ok((header, traces))
}

pub fn load_traces(path: &Path) -> Result<(TraceHeader, Vec<StepTrace>), ReportError> {
    let file = File::open(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_traces(BufReader::new(file), path)
}

pub const ATTRIBUTION_LEVELS: usize = 4;

/// Intensity bucket of `alpha_r`: four uniform buckets over [0, 1].
pub fn attribution_bucket(alpha_r: f64) -> usize {
    let a = alpha_r.clamp(0.0, 1.0);
    ((a * ATTRIBUTION_LEVELS as f64) as usize).min(ATTRIBUTION_LEVELS - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderFormat {
    Terminal,
    Html,
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub output: String,
    /// Steps rendered by id because the trace had no token string.
    pub missing_tokens: usize,
}

// light to dark
const ANSI_BG: [u8; ATTRIBUTION_LEVELS] = [255, 153, 75, 25];
const HTML_BG: [&str; ATTRIBUTION_LEVELS] = ["#f4f6fb", "#b9cdf0", "#6b93dc", "#1f4fa8"];
const HTML_FG: [&str; ATTRIBUTION_LEVELS] = ["#111", "#111", "#fff", "#fff"];

fn token_text(t: &StepTrace, missing: &mut usize) -> String {
    match &t.token {
        Some(s) => s.clone(),
        None => {
            *missing += 1;
            format!("#{}", t.token_id)
        }
    }
}

fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Shade each token by how much the reasoning guide contributed to it.
pub fn render_attribution(traces: &[StepTrace], format: RenderFormat) -> Rendered {
    let mut missing = 0;
    let mut out = String::new();
    match format {
        RenderFormat::Terminal => {
            for (i, t) in traces.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let level = attribution_bucket(t.alpha_r);
                let fg = if level >= 2 { 15 } else { 0 };
                let _ = write!(
                    out,
                    "\x1b[48;5;{};38;5;{}m{}\x1b[0m",
                    ANSI_BG[level],
                    fg,
                    token_text(t, &mut missing)
                );
            }
            out.push('\n');
        }
        RenderFormat::Html => {
            out.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>alpha_r attribution</title>\n<style>\nbody{font-family:monospace;line-height:2;max-width:60em;margin:2em auto}\n");
            for level in 0..ATTRIBUTION_LEVELS {
                let _ = writeln!(
                    out,
                    ".l{level}{{background:{};color:{};padding:2px 3px;border-radius:3px}}",
                    HTML_BG[level], HTML_FG[level]
                );
            }
            out.push_str("</style></head><body>\n<p>");
            for level in 0..ATTRIBUTION_LEVELS {
                let lo = level as f64 / ATTRIBUTION_LEVELS as f64;
                let hi = (level + 1) as f64 / ATTRIBUTION_LEVELS as f64;
                let _ = write!(out, "<span class=\"l{level}\">&alpha;<sup>r</sup> {lo:.2}&ndash;{hi:.2}</span> ");
            }
            out.push_str("</p>\n<p>");
            for t in traces {
                let level = attribution_bucket(t.alpha_r);
                let _ = write!(
                    out,
                    "<span class=\"l{level}\" title=\"t={} alpha_r={:.4}\">{}</span> ",
                    t.t,
                    t.alpha_r,
                    html_escape(&token_text(t, &mut missing))
                );
            }
            out.push_str("</p>\n</body></html>\n");
        }
    }
    if missing > 0 {
        log::warn!("{missing} step(s) have no token string, rendered by id");
    }
    Rendered {
        output: out,
        missing_tokens: missing,
    }
}

/// Counts of `alpha_r` over `bins` uniform bins of [0, 1]; 1.0 lands in the
/// last bin and out-of-range values are clamped.
pub fn alpha_histogram<I: IntoIterator<Item = f64>>(alphas: I, bins: usize) -> Result<Vec<usize>, ReportError> {
    if bins == 0 {
        return Err(ReportError::Bins);
    }
    let mut counts = vec![0; bins];
    for a in alphas {
        let a = if a.is_nan() { 0.0 } else { a.clamp(0.0, 1.0) };
        counts[((a * bins as f64) as usize).min(bins - 1)] += 1;
    }
    Ok(counts)
}

pub fn trace_histogram(traces: &[StepTrace], bins: usize) -> Result<Vec<usize>, ReportError> {
    alpha_histogram(traces.iter().map(|t| t.alpha_r), bins)
}

/// A multiple-choice option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceOption {
    pub label: String,
    pub text: String,
}

impl ChoiceOption {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            text: text.into(),
        }
    }
}

fn marker_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i:answer)(?:\s+(?i:is))?\s*[:：]?\s*[\(\[]?([A-Za-z0-9]+)[\)\]]?").unwrap()
    })
}

fn trailing_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|[\s\(\[])([A-Za-z0-9]+)[\)\]]?[\s\.\!\?]*$").unwrap())
}

/// Pick the option a free-text response commits to.
///
/// Templates are tried in priority order; within a template the last match
/// wins:
/// 1. an explicit marker, "Answer: X" / "the answer is (X)";
/// 2. a standalone label closing the response, "... so (C).";
/// 3. the text of exactly one option appearing in the response.
///
/// Returns `None` when nothing matches.
pub fn extract_choice(response: &str, options: &[ChoiceOption]) -> Option<String> {
    let is_label = |s: &str| options.iter().any(|o| o.label == s);

    let marked = marker_regex()
        .captures_iter(response)
        .filter_map(|c| c.get(1).map(|m| m.as_str()))
        .filter(|s| is_label(s))
        .last();
    if let Some(label) = marked {
        return Some(label.to_string());
    }

    if let Some(c) = trailing_regex().captures(response.trim_end()) {
        let label = &c[1];
        if is_label(label) {
            return Some(label.to_string());
        }
    }

    let lower = response.to_lowercase();
    let mut hits = options
        .iter()
        .filter(|o| !o.text.trim().is_empty() && lower.contains(&o.text.trim().to_lowercase()));
    match (hits.next(), hits.next()) {
        (Some(only), None) => Some(only.label.clone()),
        _ => None,
    }
}

/// A graded item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graded {
    pub split: String,
    pub predicted: Option<String>,
    pub gold: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Accuracy per split; unanswered items count as wrong.
pub fn tabulate(items: &[Graded]) -> BTreeMap<String, Accuracy> {
    let mut acc: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for item in items {
        let e = acc.entry(item.split.clone()).or_default();
        e.1 += 1;
        if item.predicted.as_deref() == Some(item.gold.as_str()) {
            e.0 += 1;
        }
    }
    acc.into_iter()
        .map(|(split, (correct, total))| {
            (
                split,
                Accuracy {
                    correct,
                    total,
                    accuracy: correct as f64 / total as f64,
                },
            )
        })
        .collect()
}

/// Align predictions with gold labels into a single split.
pub fn grade(split: &str, predicted: &[Option<String>], gold: &[String]) -> Result<Vec<Graded>, ReportError> {
    if predicted.len() != gold.len() {
        return Err(ReportError::Misaligned {
            predictions: predicted.len(),
            gold: gold.len(),
        });
    }
    Ok(predicted
        .iter()
        .zip(gold)
        .map(|(p, g)| Graded {
            split: split.to_string(),
            predicted: p.clone(),
            gold: g.clone(),
        })
        .collect())
}
