//! Fault injection wrapper used to exercise abort paths.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::{LogitSource, PromptInput, SessionBackend, SourceError, TokenId, Vocabulary};
use crate::numerics::LogitVector;

/// Wraps a source and fails the `n`-th logits-producing call of every session
/// opened with the matching payload presence (1 = the prefill itself).
pub struct FaultySource<S> {
    inner: S,
    fail_at: usize,
    only_omni: Option<bool>,
    injected: Arc<AtomicUsize>,
}

impl<S: LogitSource> FaultySource<S> {
    pub fn new(inner: S, fail_at: usize) -> Self {
        Self {
            inner,
            fail_at,
            only_omni: None,
            injected: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Restrict the fault to sessions with (`true`) or without (`false`) a
    /// payload, e.g. to break only the negative branch.
    pub fn only_omni(mut self, with_payload: bool) -> Self {
        self.only_omni = Some(with_payload);
        self
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    pub fn injected(&self) -> usize {
        self.injected.load(Ordering::SeqCst)
    }

    fn applies(&self, input: &PromptInput) -> bool {
        self.only_omni.is_none_or(|w| w == input.omni.is_some())
    }
}

struct FaultySession {
    inner: Box<dyn SessionBackend>,
    calls: usize,
    fail_at: Option<usize>,
    injected: Arc<AtomicUsize>,
}

impl SessionBackend for FaultySession {
    fn step(&mut self, token: TokenId) -> Result<LogitVector, SourceError> {
        self.calls += 1;
        if Some(self.calls) == self.fail_at {
            self.injected.fetch_add(1, Ordering::SeqCst);
            return Err(SourceError::Backend(format!("injected fault at call {}", self.calls)));
        }
        self.inner.step(token)
    }

    fn close(&mut self) -> Result<(), SourceError> {
        self.inner.close()
    }
}

impl<S: LogitSource> LogitSource for FaultySource<S> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn vocabulary(&self) -> &Vocabulary {
        self.inner.vocabulary()
    }

    fn context_limit(&self) -> usize {
        self.inner.context_limit()
    }

    fn open(
        &self,
        input: &PromptInput,
    ) -> Result<(Box<dyn SessionBackend>, LogitVector), SourceError> {
        let applies = self.applies(input);
        if applies && self.fail_at == 1 {
            self.injected.fetch_add(1, Ordering::SeqCst);
            return Err(SourceError::Backend("injected fault at prefill".into()));
        }
        let (inner, logits) = self.inner.open(input)?;
        Ok((
            Box::new(FaultySession {
                inner,
                calls: 1,
                fail_at: applies.then_some(self.fail_at),
                injected: Arc::clone(&self.injected),
            }),
            logits,
        ))
    }
}
