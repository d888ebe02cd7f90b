//! Provider-agnostic chat completion with retries, a concurrency bound and a
//! content-addressed response cache.
//!
//! A [`Gateway`] wraps one [`ChatBackend`]: either the OpenAI-style HTTP
//! client in [`http`] or the fixture-driven [`mock::MockBackend`]. Cache
//! entries live in `<cache_dir>/chat/<digest>.json`.

pub mod http;
pub mod mock;

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::PromptSpec;
use crate::retry::{self, RetryPolicy, Retryable};
use crate::store::FileStore;

pub use http::OpenAiCompatibleBackend;
pub use mock::MockBackend;

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GatewayError {
    #[error("authentication failed: {message}")]
    Auth { message: String },
    #[error("rate limited: {message}")]
    RateLimit {
        message: String,
        retry_after_ms: Option<u64>,
    },
    #[error("transport error: {message}")]
    Transport { message: String },
    #[error("provider returned status {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("invalid request: {message}")]
    InvalidRequest { message: String },
}

impl Retryable for GatewayError {
    fn is_retryable(&self) -> bool {
        match self {
            GatewayError::RateLimit { .. } | GatewayError::Transport { .. } => true,
            GatewayError::Provider { status, .. } => *status >= 500,
            GatewayError::Auth { .. } | GatewayError::InvalidRequest { .. } => false,
        }
    }

    fn retry_after(&self) -> Option<Duration> {
        match self {
            GatewayError::RateLimit {
                retry_after_ms: Some(ms),
                ..
            } => Some(Duration::from_millis(*ms)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Free-form tag for logs and mock fixtures; not part of the cache key.
    pub request_tag: String,
}

impl ChatRequest {
    pub fn from_prompt(spec: &PromptSpec, model_id: &str, decoding: &Decoding, request_tag: String) -> Self {
        Self {
            model_id: model_id.to_owned(),
            system_text: spec.system_text.clone(),
            user_text: spec.user_text.clone(),
            temperature: decoding.temperature,
            max_tokens: decoding.max_tokens,
            request_tag,
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        let problem = if self.model_id.trim().is_empty() {
            "model_id is empty"
        } else if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            "temperature must be a finite value >= 0"
        } else if self.max_tokens == 0 {
            "max_tokens must be positive"
        } else {
            return Ok(());
        };
        Err(GatewayError::InvalidRequest {
            message: problem.to_owned(),
        })
    }
}

/// Decoding parameters applied to every request of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Complete,
    Truncated,
    Refused,
    Error,
}

impl FinishReason {
    pub fn has_text(self) -> bool {
        matches!(self, FinishReason::Complete | FinishReason::Truncated)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    /// Present iff `finish_reason` is complete or truncated.
    pub raw_text: Option<String>,
    pub finish_reason: FinishReason,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    #[serde(default)]
    pub from_cache: bool,
    /// Backend attempts made for this response; 0 on a cache hit.
    #[serde(default)]
    pub attempts: u32,
}

impl ChatResponse {
    /// Build a response, enforcing the text/finish-reason invariant.
    pub fn new(raw_text: Option<String>, finish_reason: FinishReason) -> Self {
        let raw_text = if finish_reason.has_text() {
            Some(raw_text.unwrap_or_default())
        } else {
            None
        };
        Self {
            raw_text,
            finish_reason,
            prompt_tokens: 0,
            completion_tokens: 0,
            latency_ms: 0,
            from_cache: false,
            attempts: 0,
        }
    }
}

/// SHA-256 over the fields that determine a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey([u8; 32]);

impl CacheKey {
    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

fn hash_field(hasher: &mut Sha256, bytes: &[u8]) {
    hasher.update((bytes.len() as u64).to_be_bytes());
    hasher.update(bytes);
}

/// Digest of (model_id, system_text, user_text, temperature, max_tokens).
/// Fields are length-prefixed, so no two field tuples collide by
/// concatenation; the request tag is excluded.
pub fn cache_key(req: &ChatRequest) -> CacheKey {
    let mut h = Sha256::new();
    hash_field(&mut h, b"chat-v1");
    hash_field(&mut h, req.model_id.as_bytes());
    hash_field(&mut h, req.system_text.as_bytes());
    hash_field(&mut h, req.user_text.as_bytes());
    // -0.0 and 0.0 decode identically.
    let temperature = if req.temperature == 0.0 { 0.0f64 } else { req.temperature };
    hash_field(&mut h, &temperature.to_bits().to_be_bytes());
    hash_field(&mut h, &req.max_tokens.to_be_bytes());
    CacheKey(h.finalize().into())
}

/// One chat-completion transport.
pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    store: FileStore,
}

impl ResponseCache {
    pub fn new(cache_dir: &Path) -> Self {
        Self {
            store: FileStore::new(cache_dir.join("chat")),
        }
    }

    pub fn get(&self, key: &CacheKey) -> Option<ChatResponse> {
        self.store.get(&key.hex())
    }

    pub fn put(&self, key: &CacheKey, resp: &ChatResponse) -> std::io::Result<()> {
        let stored = ChatResponse {
            from_cache: false,
            attempts: 0,
            ..resp.clone()
        };
        self.store.put(&key.hex(), &stored)
    }
}

/// Counting semaphore bounding in-flight backend calls.
#[derive(Debug)]
pub struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(bound: usize) -> Self {
        Self {
            available: Mutex::new(bound.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Default)]
pub struct GatewayStats {
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl GatewayStats {
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::SeqCst)
    }
}

/// Cached, retrying, concurrency-bounded access to one backend. Safe to
/// share across threads.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    limiter: Arc<Limiter>,
    stats: GatewayStats,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, cache: Option<ResponseCache>, parallelism: usize) -> Self {
        Self::with_limiter(backend, cache, Arc::new(Limiter::new(parallelism)))
    }

    /// Share one limiter between gateways so the bound is global.
    pub fn with_limiter(backend: Arc<dyn ChatBackend>, cache: Option<ResponseCache>, limiter: Arc<Limiter>) -> Self {
        Self {
            backend,
            cache,
            limiter,
            stats: GatewayStats::default(),
        }
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn stats(&self) -> &GatewayStats {
        &self.stats
    }

    pub fn complete(&self, req: &ChatRequest, policy: &RetryPolicy) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let key = cache_key(req);
        if let Some(cache) = &self.cache {
            if let Some(mut hit) = cache.get(&key) {
                self.stats.cache_hits.fetch_add(1, Ordering::SeqCst);
                hit.from_cache = true;
                hit.attempts = 0;
                return Ok(hit);
            }
        }
        let (mut resp, attempts) = retry::with_backoff(policy, |attempt| {
            let _permit = self.limiter.acquire();
            self.stats.backend_calls.fetch_add(1, Ordering::SeqCst);
            log::debug!("{} attempt {attempt} for {}", self.backend.name(), req.request_tag);
            self.backend.send(req)
        })?;
        resp.from_cache = false;
        resp.attempts = attempts;
        if resp.finish_reason != FinishReason::Error {
            if let Some(cache) = &self.cache {
                if let Err(e) = cache.put(&key, &resp) {
                    log::warn!("failed to cache response {key}: {e}");
                }
            }
        }
        Ok(resp)
    }
}
