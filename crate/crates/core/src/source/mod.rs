//! Logit sources and the incremental-session contract.
//!
//! A [`LogitSource`] opens sessions; a [`Session`] is primed with a prompt by
//! [`prefill`] and then extended one accepted token at a time. The wrapper in
//! this module enforces the contract (range checks, context limit, lifecycle)
//! so backends only have to produce scores.

use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::{LogitVector, NumericsError};

pub mod fault;
pub mod remote;
pub mod toy;

pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    #[error("prompt has no tokens")]
    EmptyPrompt,
    #[error("sequence of {requested} tokens exceeds context limit {limit}")]
    Capacity { limit: usize, requested: usize },
    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenRange { token: TokenId, vocab_size: usize },
    #[error("session {0} is closed")]
    Closed(String),
    #[error("vocabulary incompatible: {0}")]
    Incompatible(VocabMismatch),
    #[error("transport failure talking to {endpoint} after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        retryable: bool,
        message: String,
    },
    #[error("protocol error [{code}]: {message}")]
    Protocol { code: String, message: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("backend failure: {0}")]
    Backend(String),
}

/// Size and content fingerprint of a token list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    size: usize,
    fingerprint: String,
    tokens: Option<Arc<Vec<String>>>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut hasher = Sha256::new();
        hasher.update((tokens.len() as u64).to_le_bytes());
        for t in &tokens {
            hasher.update((t.len() as u64).to_le_bytes());
            hasher.update(t.as_bytes());
        }
        Self {
            size: tokens.len(),
            fingerprint: hex::encode(hasher.finalize()),
            tokens: Some(Arc::new(tokens)),
        }
    }

    /// A vocabulary known only by size and fingerprint (e.g. a remote backend
    /// that does not publish its token strings).
    pub fn opaque(size: usize, fingerprint: impl Into<String>) -> Self {
        Self {
            size,
            fingerprint: fingerprint.into(),
            tokens: None,
        }
    }

    pub fn with_tokens(size: usize, fingerprint: String, tokens: Option<Vec<String>>) -> Self {
        Self {
            size,
            fingerprint,
            tokens: tokens.map(Arc::new),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn tokens(&self) -> Option<&[String]> {
        self.tokens.as_deref().map(Vec::as_slice)
    }

    pub fn token_str(&self, id: TokenId) -> Option<&str> {
        self.tokens().and_then(|t| t.get(id as usize)).map(String::as_str)
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.tokens()?
            .iter()
            .position(|t| t == token)
            .map(|i| i as TokenId)
    }
}

/// What differs between two vocabularies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabMismatch {
    pub size: Option<(usize, usize)>,
    pub fingerprint: Option<(String, String)>,
}

impl fmt::Display for VocabMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some((a, b)) = self.size {
            parts.push(format!("size {a} != {b}"));
        }
        if let Some((a, b)) = &self.fingerprint {
            parts.push(format!("fingerprint {} != {}", short(a), short(b)));
        }
        write!(f, "{}", parts.join(", "))
    }
}

fn short(s: &str) -> &str {
    &s[..s.len().min(12)]
}

pub fn check_compatibility(a: &Vocabulary, b: &Vocabulary) -> Result<(), VocabMismatch> {
    let mismatch = VocabMismatch {
        size: (a.size != b.size).then_some((a.size, b.size)),
        fingerprint: (a.fingerprint != b.fingerprint)
            .then(|| (a.fingerprint.clone(), b.fingerprint.clone())),
    };
    if mismatch.size.is_none() && mismatch.fingerprint.is_none() {
        Ok(())
    } else {
        Err(mismatch)
    }
}

/// Opaque modality attachment. Only the omni-conditioned source looks inside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OmniPayload {
    pub media_type: String,
    pub data: Vec<u8>,
}

impl OmniPayload {
    pub fn new(media_type: impl Into<String>, data: Vec<u8>) -> Self {
        Self {
            media_type: media_type.into(),
            data,
        }
    }

    /// The conditioning key carried by the payload: its first line, trimmed.
    pub fn key(&self) -> String {
        let end = self
            .data
            .iter()
            .position(|&b| b == b'\n')
            .unwrap_or(self.data.len());
        String::from_utf8_lossy(&self.data[..end]).trim().to_string()
    }

    /// Same size, same media type, key line overwritten: the content is gone
    /// but any size-dependent cost is preserved.
    pub fn perturbed(&self) -> Self {
        let mut data = self.data.clone();
        let end = data.iter().position(|&b| b == b'\n').unwrap_or(data.len());
        data[..end].fill(b'~');
        Self {
            media_type: self.media_type.clone(),
            data,
        }
    }
}

/// Token prefix plus an optional modality attachment.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptInput {
    pub text_tokens: Vec<TokenId>,
    pub omni: Option<OmniPayload>,
}

impl PromptInput {
    pub fn text(tokens: Vec<TokenId>) -> Self {
        Self {
            text_tokens: tokens,
            omni: None,
        }
    }

    pub fn with_omni(tokens: Vec<TokenId>, payload: OmniPayload) -> Self {
        Self {
            text_tokens: tokens,
            omni: Some(payload),
        }
    }

    /// The same prefix with the modality removed.
    pub fn text_only(&self) -> Self {
        Self::text(self.text_tokens.clone())
    }
}

/// Backend half of a session. Implementations may assume calls are
/// sequential, tokens are in range and the session is live.
pub trait SessionBackend: Send {
    fn step(&mut self, token: TokenId) -> Result<LogitVector, SourceError>;
    /// Release backend state. Called at most once.
    fn close(&mut self) -> Result<(), SourceError>;
}

/// A model producing next-token logits over a fixed vocabulary.
pub trait LogitSource: Send + Sync {
    fn id(&self) -> &str;
    fn vocabulary(&self) -> &Vocabulary;
    /// Maximum number of tokens a session may hold.
    fn context_limit(&self) -> usize;
    /// Evaluate the prompt and return backend state primed with it.
    fn open(&self, input: &PromptInput)
        -> Result<(Box<dyn SessionBackend>, LogitVector), SourceError>;
}

/// Incremental decoding state bound to one source and one prompt.
pub struct Session {
    source_id: String,
    accepted: usize,
    vocab_size: usize,
    context_limit: usize,
    backend: Option<Box<dyn SessionBackend>>,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("source_id", &self.source_id)
            .field("accepted", &self.accepted)
            .field("live", &self.backend.is_some())
            .finish()
    }
}

fn check_tokens(tokens: &[TokenId], vocab_size: usize) -> Result<(), SourceError> {
    match tokens.iter().find(|&&t| t as usize >= vocab_size) {
        Some(&token) => Err(SourceError::TokenRange { token, vocab_size }),
        None => Ok(()),
    }
}

fn check_logits(logits: &LogitVector, vocab: &Vocabulary) -> Result<(), SourceError> {
    if logits.len() != vocab.size() {
        return Err(SourceError::Incompatible(VocabMismatch {
            size: Some((vocab.size(), logits.len())),
            fingerprint: None,
        }));
    }
    Ok(())
}

/// Evaluate `input` on `source`, returning a live session and the logits for
/// the position after the prompt.
pub fn prefill(
    source: &dyn LogitSource,
    input: &PromptInput,
) -> Result<(Session, LogitVector), SourceError> {
    if input.text_tokens.is_empty() {
        return Err(SourceError::EmptyPrompt);
    }
    let vocab = source.vocabulary();
    check_tokens(&input.text_tokens, vocab.size())?;
    let limit = source.context_limit();
    if input.text_tokens.len() > limit {
        return Err(SourceError::Capacity {
            limit,
            requested: input.text_tokens.len(),
        });
    }
    let (backend, logits) = source.open(input)?;
    let mut session = Session {
        source_id: source.id().to_string(),
        accepted: input.text_tokens.len(),
        vocab_size: vocab.size(),
        context_limit: limit,
        backend: Some(backend),
    };
    if let Err(e) = check_logits(&logits, vocab) {
        let _ = session.close();
        return Err(e);
    }
    Ok((session, logits))
}

impl Session {
    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Number of tokens the session has consumed (prompt included).
    pub fn token_count(&self) -> usize {
        self.accepted
    }

    pub fn is_live(&self) -> bool {
        self.backend.is_some()
    }

    /// Append `token` and return logits for the following position.
    pub fn step(&mut self, token: TokenId) -> Result<LogitVector, SourceError> {
        let vocab_size = self.vocab_size;
        let limit = self.context_limit;
        let next = self.accepted + 1;
        let backend = self
            .backend
            .as_mut()
            .ok_or_else(|| SourceError::Closed(self.source_id.clone()))?;
        if token as usize >= vocab_size {
            return Err(SourceError::TokenRange { token, vocab_size });
        }
        if next > limit {
            return Err(SourceError::Capacity {
                limit,
                requested: next,
            });
        }
        let logits = backend.step(token)?;
        if logits.len() != vocab_size {
            return Err(SourceError::Incompatible(VocabMismatch {
                size: Some((vocab_size, logits.len())),
                fingerprint: None,
            }));
        }
        self.accepted = next;
        Ok(logits)
    }

    /// Release backend state. Closing twice is a no-op.
    pub fn close(&mut self) -> Result<(), SourceError> {
        match self.backend.take() {
            Some(mut backend) => backend.close(),
            None => Ok(()),
        }
    }
}

impl<T: LogitSource + ?Sized> LogitSource for Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn context_limit(&self) -> usize {
        (**self).context_limit()
    }

    fn open(&self, input: &PromptInput) -> Result<(Box<dyn SessionBackend>, LogitVector), SourceError> {
        (**self).open(input)
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Some(mut backend) = self.backend.take() {
            if let Err(e) = backend.close() {
                log::warn!("closing session on {} failed: {e}", self.source_id);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(tokens: &[&str]) -> Vocabulary {
        Vocabulary::from_tokens(tokens.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn identical_vocabularies_are_compatible() {
        assert!(check_compatibility(&vocab(&["a", "b"]), &vocab(&["a", "b"])).is_ok());
    }

    #[test]
    fn fingerprint_mismatch_reported() {
        let err = check_compatibility(&vocab(&["a", "b"]), &vocab(&["a", "c"])).unwrap_err();
        assert!(err.size.is_none());
        assert!(err.fingerprint.is_some());
    }

    #[test]
    fn size_mismatch_reported() {
        let a = Vocabulary::opaque(151_000, "x");
        let b = Vocabulary::opaque(152_000, "x");
        let err = check_compatibility(&a, &b).unwrap_err();
        assert_eq!(err.size, Some((151_000, 152_000)));
        assert!(err.fingerprint.is_none());
        assert!(err.to_string().contains("size"));
    }

    #[test]
    fn fingerprint_is_stable_and_boundary_sensitive() {
        assert_eq!(vocab(&["ab", "c"]).fingerprint(), vocab(&["ab", "c"]).fingerprint());
        assert_ne!(vocab(&["ab", "c"]).fingerprint(), vocab(&["a", "bc"]).fingerprint());
    }

    #[test]
    fn payload_key_and_perturbation() {
        let p = OmniPayload::new("image/x-toy", b"red\npadding".to_vec());
        assert_eq!(p.key(), "red");
        let q = p.perturbed();
        assert_eq!(q.data.len(), p.data.len());
        assert_eq!(q.key(), "~~~");
    }
}
