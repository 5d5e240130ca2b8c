//! Run configuration: file loading, overrides and source construction.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use omniguide::report::{load_traces, ChoiceOption};
use omniguide::server::LatencyModel;
use omniguide::source::remote::RemoteSource;
use omniguide::source::toy::{ToyModel, ToySpec};
use omniguide::{
    check_compatibility, DecodeJob, GuidanceConfig, LogitSource, NegativeInput, OmniPayload,
    PromptInput, SamplerConfig, TokenId, Vocabulary,
};
use omniguide::decoder::DEFAULT_MAX_NEW_TOKENS;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where a branch's logits come from: a toy table file or a running server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Whitespace-separated vocabulary tokens.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Raw token ids, used instead of `text`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenId>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omni_payload: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omni_media_type: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
}

/// Simulated device for benchmarking toy sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub per_token_prefill_ms: f64,
    pub per_step_ms: f64,
    pub omni_payload_ms_per_kb: f64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            per_token_prefill_ms: 1.0,
            per_step_ms: 5.0,
            omni_payload_ms_per_kb: 0.5,
        }
    }
}

impl LatencyConfig {
    pub fn model(&self) -> Result<LatencyModel, CliError> {
        LatencyModel::new(
            self.per_token_prefill_ms / 1e3,
            self.per_step_ms / 1e3,
            self.omni_payload_ms_per_kb / 1e3,
        )
        .map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchEntry {
    pub label: String,
    /// `name` or `name:alpha`.
    pub strategy: String,
    #[serde(default)]
    pub negative_input: NegativeInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub latency: LatencyConfig,
    /// Defaults to a `none` baseline plus the configured strategy.
    pub jobs: Vec<BenchEntry>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: 3,
            latency: LatencyConfig::default(),
            jobs: Vec::new(),
        }
    }
}

/// One multiple-choice item scored by `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalItem {
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omni_payload: Option<PathBuf>,
    pub options: Vec<ChoiceOption>,
    pub gold: String,
}

fn default_split() -> String {
    "default".into()
}

fn default_max_new_tokens() -> usize {
    DEFAULT_MAX_NEW_TOKENS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub base: SourceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guide: Option<SourceConfig>,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub stop: Vec<String>,
    #[serde(default)]
    pub think_tag: Vec<String>,
    #[serde(default)]
    pub negative_input: NegativeInput,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eval: Vec<EvalItem>,
}

impl RunConfig {
    /// Load a `.toml` or `.json` config, or the configuration echoed in the
    /// header of a `.jsonl` trace. Relative paths resolve against the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.exists() {
            return Err(CliError::Usage(format!("config file {} not found", path.display())));
        }
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let mut cfg: RunConfig = match ext {
            "jsonl" => {
                let (header, _) = load_traces(path).map_err(|e| CliError::Config(e.to_string()))?;
                serde_json::from_value(header.config)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            _ => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("reading {}: {e}", path.display())))?;
                if ext == "json" {
                    serde_json::from_str(&text)
                        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
                } else {
                    toml::from_str(&text)
                        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
                }
            }
        };
        let dir = path
            .canonicalize()
            .ok()
            .and_then(|p| p.parent().map(Path::to_path_buf))
            .unwrap_or_default();
        cfg.resolve_paths(&dir);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                fix(p);
            }
        };
        fix_opt(&mut self.base.toy);
        if let Some(g) = &mut self.guide {
            fix_opt(&mut g.toy);
        }
        fix_opt(&mut self.prompt.omni_payload);
        fix_opt(&mut self.output.text);
        fix_opt(&mut self.output.trace);
        for item in &mut self.eval {
            fix_opt(&mut item.omni_payload);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |m: String| CliError::Config(m);
        for (name, s) in std::iter::once(("base", Some(&self.base))).chain([("guide", self.guide.as_ref())]) {
            if let Some(s) = s {
                if s.toy.is_some() == s.endpoint.is_some() {
                    return Err(cfg(format!("[{name}] needs exactly one of `toy` or `endpoint`")));
                }
            }
        }
        if self.prompt.text.is_some() && self.prompt.tokens.is_some() {
            return Err(cfg("[prompt] takes either `text` or `tokens`, not both".into()));
        }
        self.guidance.validate().map_err(|e| cfg(e.to_string()))?;
        self.sampler.validate().map_err(|e| cfg(e.to_string()))?;
        if self.max_new_tokens == 0 {
            return Err(cfg("max_new_tokens must be >= 1".into()));
        }
        if self.guidance.needs_guide() && self.guide.is_none() {
            return Err(cfg(format!(
                "strategy {} needs a [guide] source",
                self.guidance.strategy
            )));
        }
        for item in &self.eval {
            if !item.options.iter().any(|o| o.label == item.gold) {
                return Err(cfg(format!("eval gold label `{}` is not an option", item.gold)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Built sources plus the vocabulary used for tokenizing config strings.
pub struct Sources {
    pub base: Arc<dyn LogitSource>,
    pub guide: Option<Arc<dyn LogitSource>>,
}

pub fn load_toy(path: &Path) -> Result<ToyModel, CliError> {
    let spec = ToySpec::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "toy".into());
    Ok(ToyModel::new(id, spec))
}

fn build_source(s: &SourceConfig) -> Result<Arc<dyn LogitSource>, CliError> {
    match (&s.toy, &s.endpoint) {
        (Some(p), None) => Ok(Arc::new(load_toy(p)?)),
        (None, Some(ep)) => RemoteSource::connect(ep)
            .map(|r| Arc::new(r) as Arc<dyn LogitSource>)
            .map_err(|e| CliError::Handshake(format!("{ep}: {e}"))),
        _ => Err(CliError::Config("source needs exactly one of `toy` or `endpoint`".into())),
    }
}

impl Sources {
    pub fn build(cfg: &RunConfig) -> Result<Self, CliError> {
        let base = build_source(&cfg.base)?;
        let guide = cfg.guide.as_ref().map(build_source).transpose()?;
        if let Some(g) = &guide {
            check_compatibility(base.vocabulary(), g.vocabulary())
                .map_err(|e| CliError::Handshake(format!("base `{}` vs guide `{}`: {e}", base.id(), g.id())))?;
        }
        Ok(Self { base, guide })
    }
}

/// Whitespace tokenizer over the vocabulary's token strings (demo only).
pub fn tokenize(vocab: &Vocabulary, text: &str) -> Result<Vec<TokenId>, CliError> {
    if vocab.tokens().is_none() {
        return Err(CliError::Config(
            "source vocabulary has no token strings; give [prompt] tokens as ids".into(),
        ));
    }
    text.split_whitespace()
        .map(|w| {
            vocab
                .token_id(w)
                .ok_or_else(|| CliError::Config(format!("token `{w}` is not in the vocabulary")))
        })
        .collect()
}

pub fn detokenize(vocab: &Vocabulary, tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|&t| vocab.token_str(t).map(str::to_string).unwrap_or_else(|| format!("#{t}")))
        .collect::<Vec<_>>()
        .join(" ")
}

fn read_payload(path: &Path, media_type: Option<&str>) -> Result<OmniPayload, CliError> {
    let data = fs::read(path).map_err(|e| CliError::Config(format!("omni payload {}: {e}", path.display())))?;
    Ok(OmniPayload::new(media_type.unwrap_or("application/octet-stream"), data))
}

fn prompt_input(
    vocab: &Vocabulary,
    text: Option<&str>,
    tokens: Option<&[TokenId]>,
    payload: Option<&Path>,
    media_type: Option<&str>,
) -> Result<PromptInput, CliError> {
    let ids = match (text, tokens) {
        (_, Some(t)) => t.to_vec(),
        (Some(text), None) => tokenize(vocab, text)?,
        (None, None) => Vec::new(),
    };
    Ok(match payload {
        Some(p) => PromptInput::with_omni(ids, read_payload(p, media_type)?),
        None => PromptInput::text(ids),
    })
}

/// The configured job against already-built sources.
pub fn build_job(cfg: &RunConfig, sources: &Sources) -> Result<DecodeJob, CliError> {
    let vocab = sources.base.vocabulary();
    let p = &cfg.prompt;
    let prompt = prompt_input(
        vocab,
        p.text.as_deref(),
        p.tokens.as_deref(),
        p.omni_payload.as_deref(),
        p.omni_media_type.as_deref(),
    )?;
    job_for_prompt(cfg, sources, prompt)
}

pub fn job_for_prompt(cfg: &RunConfig, sources: &Sources, prompt: PromptInput) -> Result<DecodeJob, CliError> {
    let vocab = sources.base.vocabulary();
    let words = |ws: &[String]| -> Result<Vec<TokenId>, CliError> {
        ws.iter()
            .map(|w| {
                vocab
                    .token_id(w)
                    .ok_or_else(|| CliError::Config(format!("token `{w}` is not in the vocabulary")))
            })
            .collect()
    };
    let stop: BTreeSet<TokenId> = words(&cfg.stop)?.into_iter().collect();
    let mut job = DecodeJob::new(sources.base.clone(), prompt)
        .with_guidance(cfg.guidance.clone())
        .with_sampler(cfg.sampler.clone())
        .with_max_new_tokens(cfg.max_new_tokens)
        .with_stop_tokens(stop)
        .with_think_tag(words(&cfg.think_tag)?);
    job.guide = sources.guide.clone();
    job.negative_input = cfg.negative_input;
    Ok(job)
}

/// Jobs for each `[[eval]]` item, sharing the run settings.
pub fn eval_jobs(cfg: &RunConfig, sources: &Sources) -> Result<Vec<DecodeJob>, CliError> {
    let vocab = sources.base.vocabulary();
    cfg.eval
        .iter()
        .map(|item| {
            let prompt = prompt_input(
                vocab,
                item.text.as_deref(),
                None,
                item.omni_payload.as_deref(),
                cfg.prompt.omni_media_type.as_deref(),
            )?;
            job_for_prompt(cfg, sources, prompt)
        })
        .collect()
}

/// Parse `name` or `name:alpha` into a guidance config derived from `base`.
pub fn parse_strategy(spec: &str, base: &GuidanceConfig) -> Result<GuidanceConfig, CliError> {
    let (name, alpha) = match spec.split_once(':') {
        Some((n, a)) => {
            let a: f64 = a
                .parse()
                .map_err(|_| CliError::Config(format!("bad alpha in strategy `{spec}`")))?;
            (n, Some(a))
        }
        None => (spec, None),
    };
    let strategy = name
        .trim()
        .parse()
        .map_err(|e| CliError::Config(format!("{e}")))?;
    let mut g = GuidanceConfig {
        strategy,
        ..base.clone()
    };
    if let Some(a) = alpha {
        g.alpha = a;
    }
    g.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(g)
}
