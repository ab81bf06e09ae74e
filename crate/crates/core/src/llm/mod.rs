//! Chat-completion client: pluggable transport, bounded retries with
//! exponential backoff, content-addressed response cache and usage ledger.

mod cache;
mod http;
mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::ResponseCache;
pub use http::HttpTransport;
pub use mock::{MockReply, MockRule, MockScript, MockTransport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_output_tokens: 512,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if self.messages.iter().skip(1).any(|m| m.role == Role::System) {
            return Err(LlmError::InvalidRequest("system message must be first and unique".into()));
        }
        if self
            .messages
            .iter()
            .any(|m| m.role != Role::System && m.content.trim().is_empty())
        {
            return Err(LlmError::InvalidRequest("empty user or assistant message".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// SHA-256 over every field that affects the reply.
    pub fn cache_key(&self) -> String {
        #[derive(Serialize)]
        struct Keyed<'a> {
            model: &'a str,
            messages: &'a [ChatMessage],
            temperature_bits: u64,
            max_output_tokens: u32,
        }
        let keyed = Keyed {
            model: &self.model,
            messages: &self.messages,
            temperature_bits: self.temperature.to_bits(),
            max_output_tokens: self.max_output_tokens,
        };
        let bytes = serde_json::to_vec(&keyed).expect("request serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn last_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cached: bool,
}

/// What a transport hands back for one successful request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportReply {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("server error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("mock script: {0}")]
    Script(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            TransportError::RateLimited(_) | TransportError::Server { .. } | TransportError::Network(_)
        )
    }
}

/// Carries one request to a provider. Implementations must be shareable.
pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<TransportReply, TransportError>;
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failure: {0}")]
    Auth(String),
    #[error("giving up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: TransportError },
    #[error(transparent)]
    Transport(TransportError),
    #[error("response used {used} completion tokens, over the limit of {limit}")]
    OutputTooLong { used: u64, limit: u32 },
    #[error("response cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// No waiting between attempts.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
            jitter: false,
        }
    }

    /// Delay before retry number `attempt` (1-based count of failures so far).
    pub fn delay_for(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(1u32 << attempt.saturating_sub(1).min(16))
            .min(self.max_delay);
        if self.jitter && !exp.is_zero() {
            let f: f64 = rand::thread_rng().gen_range(0.5..1.0);
            exp.mul_f64(f)
        } else {
            exp
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Requests that reached the provider.
    pub requests: u64,
    pub cache_hits: u64,
}

/// Per-model token and request totals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLedger {
    pub models: BTreeMap<String, ModelUsage>,
}

impl UsageLedger {
    /// Cached responses cost nothing and only bump the cache-hit counter.
    pub fn record(&mut self, model: &str, response: &ChatResponse) {
        let entry = self.models.entry(model.to_string()).or_default();
        if response.cached {
            entry.cache_hits += 1;
        } else {
            entry.prompt_tokens += response.prompt_tokens;
            entry.completion_tokens += response.completion_tokens;
            entry.requests += 1;
        }
    }

    pub fn totals(&self) -> ModelUsage {
        self.models.values().fold(ModelUsage::default(), |acc, u| ModelUsage {
            prompt_tokens: acc.prompt_tokens + u.prompt_tokens,
            completion_tokens: acc.completion_tokens + u.completion_tokens,
            requests: acc.requests + u.requests,
            cache_hits: acc.cache_hits + u.cache_hits,
        })
    }
}

/// Functional form of [`UsageLedger::record`].
pub fn record_usage(mut ledger: UsageLedger, model: &str, response: &ChatResponse) -> UsageLedger {
    ledger.record(model, response);
    ledger
}

/// Counting semaphore bounding in-flight provider requests.
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore lock");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore lock");
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct LlmClient {
    transport: Arc<dyn Transport>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    in_flight: Semaphore,
    ledger: Mutex<UsageLedger>,
    transport_calls: AtomicU64,
}

impl fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmClient")
            .field("cache", &self.cache)
            .field("retry", &self.retry)
            .field("transport_calls", &self.transport_calls)
            .finish_non_exhaustive()
    }
}

impl LlmClient {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self {
            transport,
            cache: None,
            retry: RetryPolicy::default(),
            in_flight: Semaphore::new(4),
            ledger: Mutex::new(UsageLedger::default()),
            transport_calls: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.in_flight = Semaphore::new(n);
        self
    }

    /// Number of requests handed to the transport, retries included.
    pub fn transport_calls(&self) -> u64 {
        self.transport_calls.load(Ordering::SeqCst)
    }

    pub fn usage(&self) -> UsageLedger {
        self.ledger.lock().expect("ledger lock").clone()
    }

    fn send_with_retry(&self, request: &ChatRequest) -> Result<TransportReply, LlmError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.in_flight.acquire();
                self.transport_calls.fetch_add(1, Ordering::SeqCst);
                self.transport.send(request)
            };
            match result {
                Ok(reply) => return Ok(reply),
                Err(TransportError::Auth(msg)) => return Err(LlmError::Auth(msg)),
                Err(e) if e.is_retryable() => {
                    if attempt >= self.retry.max_attempts {
                        return Err(LlmError::Exhausted { attempts: attempt, last: e });
                    }
                    log::warn!("chat attempt {attempt} failed ({e}); retrying");
                    std::thread::sleep(self.retry.delay_for(attempt));
                }
                Err(e) => return Err(LlmError::Transport(e)),
            }
        }
    }

    /// Returns the cached reply when present, otherwise calls the provider
    /// and stores the reply. Every response is recorded in the usage ledger.
    pub fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let key = request.cache_key();
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key).map_err(LlmError::Cache)? {
                let response = ChatResponse {
                    text: hit.text,
                    prompt_tokens: hit.prompt_tokens,
                    completion_tokens: hit.completion_tokens,
                    cached: true,
                };
                self.ledger.lock().expect("ledger lock").record(&request.model, &response);
                return Ok(response);
            }
        }
        let reply = self.send_with_retry(request)?;
        if reply.completion_tokens > u64::from(request.max_output_tokens) {
            return Err(LlmError::OutputTooLong {
                used: reply.completion_tokens,
                limit: request.max_output_tokens,
            });
        }
        if let Some(cache) = &self.cache {
            cache.put(&key, &reply).map_err(LlmError::Cache)?;
        }
        let response = ChatResponse {
            text: reply.text,
            prompt_tokens: reply.prompt_tokens,
            completion_tokens: reply.completion_tokens,
            cached: false,
        };
        self.ledger.lock().expect("ledger lock").record(&request.model, &response);
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("gpt-3.5-turbo", vec![ChatMessage::user(text)])
    }

    #[test]
    fn cache_hit_skips_transport() {
        let dir = tempfile::TempDir::new().unwrap();
        let mock = Arc::new(MockTransport::new(MockScript::default_reply("SELECT 1")));
        let client = LlmClient::new(mock.clone()).with_cache(ResponseCache::new(dir.path()).unwrap());
        let a = client.chat(&req("q")).unwrap();
        let b = client.chat(&req("q")).unwrap();
        assert!(!a.cached && b.cached);
        assert_eq!(a.text, b.text);
        assert_eq!(mock.calls(), 1);
        let usage = client.usage().models["gpt-3.5-turbo"];
        assert_eq!((usage.requests, usage.cache_hits), (1, 1));
    }

    #[test]
    fn scripted_text_is_returned() {
        let mock = Arc::new(MockTransport::new(MockScript::ordinal(["SELECT count(*) FROM student"])));
        let client = LlmClient::new(mock);
        assert_eq!(client.chat(&req("q")).unwrap().text, "SELECT count(*) FROM student");
    }

    #[test]
    fn retries_until_success() {
        let script = MockScript {
            by_ordinal: vec![
                MockReply::error("rate_limited"),
                MockReply::error("server"),
                MockReply::text("SELECT 3"),
            ],
            ..Default::default()
        };
        let mock = Arc::new(MockTransport::new(script));
        let client = LlmClient::new(mock.clone()).with_retry(RetryPolicy::immediate(3));
        assert_eq!(client.chat(&req("q")).unwrap().text, "SELECT 3");
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn retries_exhaust() {
        let script = MockScript {
            by_ordinal: vec![MockReply::error("network"); 3],
            ..Default::default()
        };
        let client = LlmClient::new(Arc::new(MockTransport::new(script))).with_retry(RetryPolicy::immediate(3));
        assert!(matches!(client.chat(&req("q")), Err(LlmError::Exhausted { attempts: 3, .. })));
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let script = MockScript {
            by_ordinal: vec![MockReply::error("auth"), MockReply::text("SELECT 1")],
            ..Default::default()
        };
        let mock = Arc::new(MockTransport::new(script));
        let client = LlmClient::new(mock.clone()).with_retry(RetryPolicy::immediate(3));
        assert!(matches!(client.chat(&req("q")), Err(LlmError::Auth(_))));
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn output_limit_enforced() {
        let long = "SELECT ".to_string() + &"a, ".repeat(400) + "b FROM t";
        let client = LlmClient::new(Arc::new(MockTransport::new(MockScript::default_reply(&long))));
        let mut r = req("q");
        r.max_output_tokens = 10;
        assert!(matches!(client.chat(&r), Err(LlmError::OutputTooLong { limit: 10, .. })));
    }

    #[test]
    fn request_validation() {
        assert!(ChatRequest::new("m", vec![]).validate().is_err());
        let two_systems = ChatRequest::new("m", vec![ChatMessage::system("a"), ChatMessage::system("b")]);
        assert!(two_systems.validate().is_err());
        assert!(ChatRequest::new("m", vec![ChatMessage::user(" ")]).validate().is_err());
    }

    #[test]
    fn cache_key_sensitive_to_every_field() {
        let base = req("q");
        let mut variants = vec![base.clone(); 4];
        variants[0].model = "other".into();
        variants[1].messages[0].content = "q2".into();
        variants[2].temperature = 0.5;
        variants[3].max_output_tokens = 7;
        for v in variants {
            assert_ne!(v.cache_key(), base.cache_key());
        }
        assert_eq!(base.cache_key(), req("q").cache_key());
    }

    #[test]
    fn ledger_examples() {
        let fresh = UsageLedger::default();
        let r = ChatResponse { text: "x".into(), prompt_tokens: 10, completion_tokens: 5, cached: false };
        let l = record_usage(fresh, "m", &r);
        assert_eq!(l.models["m"], ModelUsage { prompt_tokens: 10, completion_tokens: 5, requests: 1, cache_hits: 0 });
        let l = record_usage(l, "m", &ChatResponse { cached: true, ..r });
        assert_eq!(l.models["m"], ModelUsage { prompt_tokens: 10, completion_tokens: 5, requests: 1, cache_hits: 1 });
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy { jitter: false, ..RetryPolicy::default() };
        assert_eq!(p.delay_for(1), Duration::from_millis(500));
        assert_eq!(p.delay_for(2), Duration::from_millis(1000));
        assert_eq!(p.delay_for(10), Duration::from_secs(8));
    }

    proptest! {
        #[test]
        fn ledger_totals_are_sums(items in prop::collection::vec((0u64..10_000, 0u64..10_000, any::<bool>(), 0usize..3), 0..60)) {
            let models = ["a", "b", "c"];
            let mut ledger = UsageLedger::default();
            let (mut p, mut c, mut n, mut hits) = (0, 0, 0, 0);
            for (pt, ct, cached, m) in items {
                ledger.record(models[m], &ChatResponse { text: String::new(), prompt_tokens: pt, completion_tokens: ct, cached });
                if cached { hits += 1 } else { p += pt; c += ct; n += 1 }
            }
            let t = ledger.totals();
            prop_assert_eq!((t.prompt_tokens, t.completion_tokens, t.requests, t.cache_hits), (p, c, n, hits));
        }
    }
}
