//! Provider contracts (chat completion, NLI, embeddings, commonsense) and the
//! call-counting decorator used for cost accounting.

use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::persona::RelationType;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited")]
    RateLimited,
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProviderError::RateLimited | ProviderError::Timeout | ProviderError::Transport(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: Option<String>,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f32,
}

impl ChatRequest {
    /// Single user turn at temperature 0.
    pub fn user(text: impl Into<String>, max_tokens: u32) -> Self {
        ChatRequest {
            system: None,
            messages: alloc::vec![ChatMessage {
                role: Role::User,
                text: text.into(),
            }],
            max_tokens,
            temperature: 0.0,
        }
    }

    pub fn prompt_chars(&self) -> usize {
        self.system.as_ref().map_or(0, |s| s.len()) + self.messages.iter().map(|m| m.text.len()).sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<Usage>,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ChatResponse {
            text: text.into(),
            usage: None,
        }
    }
}

pub trait ChatProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

/// Three-class NLI output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliDistribution {
    pub entail: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

impl NliDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn validate(self) -> Result<Self, ProviderError> {
        let parts = [self.entail, self.neutral, self.contradiction];
        let sum: f64 = parts.iter().sum();
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || libm::fabs(sum - 1.0) > Self::SUM_TOLERANCE {
            return Err(ProviderError::BadResponse(alloc::format!(
                "NLI probabilities {parts:?} do not form a distribution"
            )));
        }
        Ok(self)
    }
}

pub trait NliProvider {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliDistribution, ProviderError>;

    /// Batched classification; results are index-aligned with `pairs`.
    fn classify_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<NliDistribution>, ProviderError> {
        pairs.iter().map(|(p, h)| self.classify(p, h)).collect()
    }
}

pub trait EmbeddingProvider {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

pub trait CommonsenseProvider {
    fn generate(&self, persona_text: &str, relation: RelationType) -> Result<Vec<String>, ProviderError>;
}

macro_rules! forward_pointer {
    ($($ptr:ty),*) => {$(
        impl<T: ChatProvider + ?Sized> ChatProvider for $ptr {
            fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
                (**self).complete(request)
            }
        }

        impl<T: NliProvider + ?Sized> NliProvider for $ptr {
            fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliDistribution, ProviderError> {
                (**self).classify(premise, hypothesis)
            }
            fn classify_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<NliDistribution>, ProviderError> {
                (**self).classify_batch(pairs)
            }
        }

        impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for $ptr {
            fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ProviderError> {
                (**self).embed(texts)
            }
        }

        impl<T: CommonsenseProvider + ?Sized> CommonsenseProvider for $ptr {
            fn generate(&self, persona_text: &str, relation: RelationType) -> Result<Vec<String>, ProviderError> {
                (**self).generate(persona_text, relation)
            }
        }
    )*};
}

forward_pointer!(&T, alloc::boxed::Box<T>, alloc::sync::Arc<T>);

/// Snapshot of a [`Counted`] provider's counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    /// Provider invocations (one per batch for batched providers).
    pub calls: u64,
    /// Individual items requested (NLI pairs, embedded texts, chat completions).
    pub items: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub failures: u64,
}

impl CallCounts {
    pub fn since(self, earlier: CallCounts) -> CallCounts {
        CallCounts {
            calls: self.calls - earlier.calls,
            items: self.items - earlier.items,
            prompt_tokens: self.prompt_tokens - earlier.prompt_tokens,
            completion_tokens: self.completion_tokens - earlier.completion_tokens,
            failures: self.failures - earlier.failures,
        }
    }
}

impl core::ops::Add for CallCounts {
    type Output = CallCounts;
    fn add(self, o: CallCounts) -> CallCounts {
        CallCounts {
            calls: self.calls + o.calls,
            items: self.items + o.items,
            prompt_tokens: self.prompt_tokens + o.prompt_tokens,
            completion_tokens: self.completion_tokens + o.completion_tokens,
            failures: self.failures + o.failures,
        }
    }
}

impl core::ops::AddAssign for CallCounts {
    fn add_assign(&mut self, o: CallCounts) {
        *self = *self + o;
    }
}

/// Rough token estimate for providers that do not report usage.
pub fn estimate_tokens(chars: usize) -> u64 {
    chars.div_ceil(4) as u64
}

/// Decorator counting every call that passes through a provider.
#[derive(Debug, Default)]
pub struct Counted<P> {
    inner: P,
    calls: AtomicU64,
    items: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
    failures: AtomicU64,
}

impl<P> Counted<P> {
    pub fn new(inner: P) -> Self {
        Counted {
            inner,
            calls: AtomicU64::new(0),
            items: AtomicU64::new(0),
            prompt_tokens: AtomicU64::new(0),
            completion_tokens: AtomicU64::new(0),
            failures: AtomicU64::new(0),
        }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            calls: self.calls.load(Ordering::Relaxed),
            items: self.items.load(Ordering::Relaxed),
            prompt_tokens: self.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: self.completion_tokens.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
        }
    }

    fn tally<T>(&self, items: u64, result: &Result<T, ProviderError>) {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.items.fetch_add(items, Ordering::Relaxed);
        if result.is_err() {
            self.failures.fetch_add(1, Ordering::Relaxed);
        }
    }
}

impl<P: ChatProvider> ChatProvider for Counted<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let result = self.inner.complete(request);
        self.tally(1, &result);
        if let Ok(resp) = &result {
            let usage = resp.usage.unwrap_or(Usage {
                prompt_tokens: estimate_tokens(request.prompt_chars()),
                completion_tokens: estimate_tokens(resp.text.len()),
            });
            self.prompt_tokens.fetch_add(usage.prompt_tokens, Ordering::Relaxed);
            self.completion_tokens
                .fetch_add(usage.completion_tokens, Ordering::Relaxed);
        }
        result
    }
}

impl<P: NliProvider> NliProvider for Counted<P> {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliDistribution, ProviderError> {
        let result = self.inner.classify(premise, hypothesis);
        self.tally(1, &result);
        result
    }

    fn classify_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<NliDistribution>, ProviderError> {
        let result = self.inner.classify_batch(pairs);
        self.tally(pairs.len() as u64, &result);
        result
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for Counted<P> {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let result = self.inner.embed(texts);
        self.tally(texts.len() as u64, &result);
        result
    }
}

impl<P: CommonsenseProvider> CommonsenseProvider for Counted<P> {
    fn generate(&self, persona_text: &str, relation: RelationType) -> Result<Vec<String>, ProviderError> {
        let result = self.inner.generate(persona_text, relation);
        self.tally(1, &result);
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed;
    impl NliProvider for Fixed {
        fn classify(&self, _: &str, _: &str) -> Result<NliDistribution, ProviderError> {
            Ok(NliDistribution {
                entail: 0.2,
                neutral: 0.3,
                contradiction: 0.5,
            })
        }
    }

    #[test]
    fn counts_batches_and_items() {
        let nli = Counted::new(Fixed);
        nli.classify("a", "b").unwrap();
        nli.classify_batch(&[("a", "b"), ("b", "a"), ("c", "d")]).unwrap();
        let c = nli.counts();
        assert_eq!((c.calls, c.items, c.failures), (2, 4, 0));
    }

    #[test]
    fn distribution_must_sum_to_one() {
        let ok = NliDistribution {
            entail: 0.05,
            neutral: 0.05,
            contradiction: 0.9,
        };
        assert!(ok.validate().is_ok());
        let bad = NliDistribution {
            entail: 0.5,
            neutral: 0.5,
            contradiction: 0.5,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn retryable_classes() {
        assert!(ProviderError::RateLimited.is_retryable());
        assert!(ProviderError::Timeout.is_retryable());
        assert!(!ProviderError::Auth("no key".into()).is_retryable());
    }
}
