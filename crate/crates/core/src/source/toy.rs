//! Deterministic n-gram table models.
//!
//! Logits for a prefix come from the longest context in the table that is a
//! suffix of the prefix; tokens without a row score 0, and a prefix with no
//! matching context yields all-zero logits. When a payload is attached, the
//! rows of the `@omni <key>` section named by the payload key are matched the
//! same way and override the base scores token by token.
//!
//! Text format, one rule per line:
//!
//! ```text
//! # comment
//! @vocab Q A B <eos>
//! @context_limit 128
//! Q | A | 5
//! Q A | B | 2.5
//! @omni red
//! Q | B | 9
//! @base
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use thiserror::Error;

use super::{LogitSource, PromptInput, SessionBackend, SourceError, TokenId, Vocabulary};
use crate::numerics::LogitVector;

pub const DEFAULT_CONTEXT_LIMIT: usize = 32_768;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToySpecError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("token {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("duplicate rule for context {context:?} -> {next:?}")]
    Duplicate { context: String, next: String },
    #[error("score {0} is not finite")]
    NonFinite(f64),
    #[error("vocabulary is empty or missing")]
    EmptyVocabulary,
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateToken(String),
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

type Table = HashMap<Vec<TokenId>, Vec<(TokenId, f64)>>;

/// A parsed and validated table model description.
#[derive(Debug, Clone)]
pub struct ToySpec {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
    context_limit: usize,
    base: Table,
    omni: BTreeMap<String, Table>,
}

impl ToySpec {
    pub fn new<S: AsRef<str>>(vocab: &[S]) -> Result<Self, ToySpecError> {
        if vocab.is_empty() {
            return Err(ToySpecError::EmptyVocabulary);
        }
        let mut index = HashMap::new();
        for (i, t) in vocab.iter().enumerate() {
            if index.insert(t.as_ref().to_string(), i as TokenId).is_some() {
                return Err(ToySpecError::DuplicateToken(t.as_ref().to_string()));
            }
        }
        Ok(Self {
            vocab: vocab.iter().map(|s| s.as_ref().to_string()).collect(),
            index,
            context_limit: DEFAULT_CONTEXT_LIMIT,
            base: HashMap::new(),
            omni: BTreeMap::new(),
        })
    }

    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit = limit;
        self
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, token: &str) -> Result<TokenId, ToySpecError> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| ToySpecError::OutOfVocabulary(token.to_string()))
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>, ToySpecError> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Add a base rule `context -> next` with `score`.
    pub fn rule<S: AsRef<str>>(
        mut self,
        context: &[S],
        next: &str,
        score: f64,
    ) -> Result<Self, ToySpecError> {
        self.insert(None, context, next, score)?;
        Ok(self)
    }

    /// Add a conditioning rule active when the payload key equals `key`.
    pub fn omni_rule<S: AsRef<str>>(
        mut self,
        key: &str,
        context: &[S],
        next: &str,
        score: f64,
    ) -> Result<Self, ToySpecError> {
        self.insert(Some(key), context, next, score)?;
        Ok(self)
    }

    fn insert<S: AsRef<str>>(
        &mut self,
        key: Option<&str>,
        context: &[S],
        next: &str,
        score: f64,
    ) -> Result<(), ToySpecError> {
        if !score.is_finite() {
            return Err(ToySpecError::NonFinite(score));
        }
        let ctx = self.ids(context)?;
        let next_id = self.id(next)?;
        let table = match key {
            None => &mut self.base,
            Some(k) => self.omni.entry(k.to_string()).or_default(),
        };
        let row = table.entry(ctx).or_default();
        if row.iter().any(|&(t, _)| t == next_id) {
            return Err(ToySpecError::Duplicate {
                context: context
                    .iter()
                    .map(|s| s.as_ref())
                    .collect::<Vec<_>>()
                    .join(" "),
                next: next.to_string(),
            });
        }
        row.push((next_id, score));
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ToySpecError> {
        let mut spec: Option<ToySpec> = None;
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| ToySpecError::Parse {
                line: line_no,
                message,
            };
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(directive) = line.strip_prefix('@') {
                let mut parts = directive.split_whitespace();
                match parts.next() {
                    Some("vocab") => {
                        if spec.is_some() {
                            return Err(err("@vocab given twice".into()));
                        }
                        let tokens: Vec<&str> = parts.collect();
                        spec = Some(ToySpec::new(&tokens)?);
                    }
                    Some("context_limit") => {
                        let s = spec.as_mut().ok_or_else(|| err("@vocab must come first".into()))?;
                        let value = parts
                            .next()
                            .and_then(|v| v.parse::<usize>().ok())
                            .filter(|&v| v > 0)
                            .ok_or_else(|| err("@context_limit needs a positive integer".into()))?;
                        s.context_limit = value;
                    }
                    Some("omni") => {
                        let key: Vec<&str> = parts.collect();
                        if key.is_empty() {
                            return Err(err("@omni needs a key".into()));
                        }
                        section = Some(key.join(" "));
                    }
                    Some("base") => section = None,
                    other => return Err(err(format!("unknown directive {other:?}"))),
                }
                continue;
            }
            let s = spec.as_mut().ok_or_else(|| err("@vocab must come first".into()))?;
            let fields: Vec<&str> = line.split('|').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(err("expected `context | next | score`".into()));
            }
            let context: Vec<&str> = fields[0].split_whitespace().collect();
            let next = fields[1];
            if next.is_empty() || next.split_whitespace().count() != 1 {
                return Err(err("next must be a single token".into()));
            }
            let score: f64 = fields[2]
                .parse()
                .map_err(|_| err(format!("bad score {:?}", fields[2])))?;
            s.insert(section.as_deref(), &context, next, score)?;
        }
        spec.ok_or(ToySpecError::EmptyVocabulary)
    }

    pub fn load(path: &Path) -> Result<Self, ToySpecError> {
        let text = std::fs::read_to_string(path).map_err(|e| ToySpecError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }
}

fn longest_suffix<'a>(
    table: &'a Table,
    max_len: usize,
    prefix: &[TokenId],
) -> Option<&'a Vec<(TokenId, f64)>> {
    let longest = max_len.min(prefix.len());
    (0..=longest)
        .rev()
        .find_map(|k| table.get(&prefix[prefix.len() - k..]))
}

struct Tables {
    vocab_size: usize,
    base: Table,
    base_max: usize,
    omni: BTreeMap<String, (Table, usize)>,
}

fn max_context(table: &Table) -> usize {
    table.keys().map(Vec::len).max().unwrap_or(0)
}

impl Tables {
    fn logits(&self, prefix: &[TokenId], key: Option<&str>) -> LogitVector {
        let mut scores = vec![0.0; self.vocab_size];
        if let Some(row) = longest_suffix(&self.base, self.base_max, prefix) {
            for &(t, s) in row {
                scores[t as usize] = s;
            }
        }
        if let Some((table, max_len)) = key.and_then(|k| self.omni.get(k)) {
            if let Some(row) = longest_suffix(table, *max_len, prefix) {
                for &(t, s) in row {
                    scores[t as usize] = s;
                }
            }
        }
        LogitVector::new(scores).expect("table scores are finite")
    }
}

/// In-process table model. Clones share tables and the live-session count.
#[derive(Clone)]
pub struct ToyModel {
    id: String,
    vocab: Vocabulary,
    context_limit: usize,
    tables: Arc<Tables>,
    live: Arc<AtomicUsize>,
}

impl ToyModel {
    pub fn new(id: impl Into<String>, spec: ToySpec) -> Self {
        let base_max = max_context(&spec.base);
        let omni = spec
            .omni
            .into_iter()
            .map(|(k, t)| {
                let m = max_context(&t);
                (k, (t, m))
            })
            .collect();
        Self {
            id: id.into(),
            vocab: Vocabulary::from_tokens(spec.vocab),
            context_limit: spec.context_limit,
            tables: Arc::new(Tables {
                vocab_size: spec.index.len(),
                base: spec.base,
                base_max,
                omni,
            }),
            live: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Stateless evaluation of a full prefix.
    pub fn evaluate(&self, input: &PromptInput) -> LogitVector {
        let key = input.omni.as_ref().map(|p| p.key());
        self.tables.logits(&input.text_tokens, key.as_deref())
    }

    /// Sessions opened and not yet closed.
    pub fn live_sessions(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }
}

struct ToySession {
    tables: Arc<Tables>,
    prefix: Vec<TokenId>,
    key: Option<String>,
    live: Arc<AtomicUsize>,
}

impl SessionBackend for ToySession {
    fn step(&mut self, token: TokenId) -> Result<LogitVector, SourceError> {
        self.prefix.push(token);
        Ok(self.tables.logits(&self.prefix, self.key.as_deref()))
    }

    fn close(&mut self) -> Result<(), SourceError> {
        self.live.fetch_sub(1, Ordering::SeqCst);
        Ok(())
    }
}

impl LogitSource for ToyModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn context_limit(&self) -> usize {
        self.context_limit
    }

    fn open(
        &self,
        input: &PromptInput,
    ) -> Result<(Box<dyn SessionBackend>, LogitVector), SourceError> {
        let logits = self.evaluate(input);
        self.live.fetch_add(1, Ordering::SeqCst);
        let session = ToySession {
            tables: Arc::clone(&self.tables),
            prefix: input.text_tokens.clone(),
            key: input.omni.as_ref().map(|p| p.key()),
            live: Arc::clone(&self.live),
        };
        Ok((Box::new(session), logits))
    }
}
