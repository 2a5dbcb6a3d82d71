//! All model traffic goes through [`Gateway`].
//!
//! A gateway wraps a [`Backend`] (a live OpenAI-compatible endpoint or the
//! simulated model) with a fingerprint-keyed response cache, retries, and a
//! record/replay [`Cassette`]. Identical requests, including the sample
//! index, are served from the cache. In replay mode no backend is consulted
//! at all and a cache miss is an error.

mod cassette;
mod openai;

pub use cassette::{fingerprint, Cassette, CassetteEntry};
pub use openai::OpenAiBackend;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub logprobs_top_k: u32,
}

impl SamplingParams {
    /// Stochastic generation: temperature 1, top-p 0.95, 512 tokens.
    pub const fn sampling() -> Self {
        SamplingParams {
            temperature: 1.0,
            top_p: 0.95,
            max_tokens: 512,
            logprobs_top_k: 0,
        }
    }

    /// Self-judging calls: greedy decoding, top 10 first-token logprobs.
    pub const fn discriminative() -> Self {
        SamplingParams {
            temperature: 0.0,
            top_p: 0.95,
            max_tokens: 512,
            logprobs_top_k: 10,
        }
    }

    /// Greedy decoding without logprobs (judges, decomposer, assembler).
    pub const fn greedy() -> Self {
        SamplingParams {
            temperature: 0.0,
            top_p: 0.95,
            max_tokens: 512,
            logprobs_top_k: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let ok = self.temperature >= 0.0
            && self.temperature.is_finite()
            && self.top_p > 0.0
            && self.top_p <= 1.0
            && self.max_tokens > 0;
        if ok {
            Ok(())
        } else {
            Err(GatewayError::InvalidParams(format!("{self:?}")))
        }
    }
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self::sampling()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAlternative {
    pub token: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    /// First generated token's top-k alternatives, most probable first.
    /// Present only when logprobs were requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token_alternatives: Option<Vec<TokenAlternative>>,
}

impl CompletionResult {
    pub fn text(text: impl Into<String>) -> Self {
        CompletionResult {
            text: text.into(),
            first_token_alternatives: None,
        }
    }

    /// Clamps probabilities into [0, 1], sorts descending (stable on ties)
    /// and keeps at most `top_k`. Drops alternatives entirely when `top_k`
    /// is zero.
    pub fn normalized(mut self, top_k: u32) -> Self {
        if top_k == 0 {
            self.first_token_alternatives = None;
            return self;
        }
        let mut alts = self.first_token_alternatives.take().unwrap_or_default();
        for a in &mut alts {
            a.probability = if a.probability.is_nan() {
                0.0
            } else {
                a.probability.clamp(0.0, 1.0)
            };
        }
        alts.sort_by(|a, b| b.probability.total_cmp(&a.probability));
        alts.truncate(top_k as usize);
        self.first_token_alternatives = Some(alts);
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChatRequest<'a> {
    pub model_id: &'a str,
    pub prompt: &'a str,
    pub params: &'a SamplingParams,
    pub sample_index: u32,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("rate limited (HTTP 429)")]
    RateLimited { retry_after: Option<Duration> },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected response body: {0}")]
    Decode(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout(_) | BackendError::RateLimited { .. } | BackendError::Transport(_) => true,
            BackendError::Http { status, .. } => *status >= 500,
            BackendError::Decode(_) => false,
        }
    }
}

/// A chat-completion provider.
pub trait Backend: Send + Sync {
    fn chat(&self, request: &ChatRequest<'_>) -> Result<CompletionResult, BackendError>;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cassette miss: {0}")]
    CassetteMiss(String),
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error("n must be at least 1")]
    EmptySample,
    #[error("gateway has no backend configured")]
    NoBackend,
    #[error("request failed after {attempts} attempts: {source}")]
    Exhausted {
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("request failed: {0}")]
    Fatal(#[source] BackendError),
    #[error("sample {index} failed: {source}")]
    SampleFailed {
        index: u32,
        #[source]
        source: Box<GatewayError>,
    },
    #[error("cassette {path}: {message}")]
    Cassette { path: PathBuf, message: String },
}

impl GatewayError {
    pub fn is_cassette_miss(&self) -> bool {
        match self {
            GatewayError::CassetteMiss(_) => true,
            GatewayError::SampleFailed { source, .. } => source.is_cassette_miss(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    /// Backend calls with an in-memory cache only.
    Live,
    /// Backend calls for misses, every new result appended to the cassette.
    Record,
    /// Cassette only; never touches the backend.
    Replay,
}

impl fmt::Display for GatewayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GatewayMode::Live => "live",
            GatewayMode::Record => "record",
            GatewayMode::Replay => "replay",
        })
    }
}

impl FromStr for GatewayMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(GatewayMode::Live),
            "record" => Ok(GatewayMode::Record),
            "replay" => Ok(GatewayMode::Replay),
            _ => Err(format!("unknown gateway mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt)
    }
}

pub const DEFAULT_IN_FLIGHT: usize = 8;

type Slot = Arc<Mutex<Option<CompletionResult>>>;

pub struct Gateway {
    mode: GatewayMode,
    backend: Option<Arc<dyn Backend>>,
    retry: RetryPolicy,
    cassette: Mutex<Cassette>,
    cassette_path: Option<PathBuf>,
    slots: Mutex<HashMap<String, Slot>>,
    backend_calls: AtomicUsize,
    pool: rayon::ThreadPool,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.mode)
            .field("cassette_path", &self.cassette_path)
            .field("backend_calls", &self.backend_calls())
            .finish()
    }
}

pub struct GatewayBuilder {
    mode: GatewayMode,
    backend: Option<Arc<dyn Backend>>,
    cassette_path: Option<PathBuf>,
    retry: RetryPolicy,
    in_flight: usize,
}

impl GatewayBuilder {
    pub fn backend(mut self, backend: Arc<dyn Backend>) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn cassette(mut self, path: impl Into<PathBuf>) -> Self {
        self.cassette_path = Some(path.into());
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn in_flight(mut self, n: usize) -> Self {
        self.in_flight = n.max(1);
        self
    }

    pub fn build(self) -> Result<Gateway, GatewayError> {
        let cassette = match (&self.cassette_path, self.mode) {
            (Some(p), GatewayMode::Replay) => Cassette::load(p)?,
            (Some(p), GatewayMode::Record) if p.exists() => Cassette::load(p)?,
            (None, GatewayMode::Replay) | (None, GatewayMode::Record) => {
                return Err(GatewayError::Cassette {
                    path: PathBuf::new(),
                    message: format!("{} mode needs a cassette path", self.mode),
                })
            }
            _ => Cassette::default(),
        };
        if self.mode != GatewayMode::Replay && self.backend.is_none() {
            return Err(GatewayError::NoBackend);
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.in_flight)
            .thread_name(|i| format!("gateway-{i}"))
            .build()
            .expect("thread pool");
        Ok(Gateway {
            mode: self.mode,
            backend: if self.mode == GatewayMode::Replay {
                None
            } else {
                self.backend
            },
            retry: self.retry,
            cassette: Mutex::new(cassette),
            cassette_path: self.cassette_path,
            slots: Mutex::new(HashMap::new()),
            backend_calls: AtomicUsize::new(0),
            pool,
        })
    }
}

impl Gateway {
    pub fn builder(mode: GatewayMode) -> GatewayBuilder {
        GatewayBuilder {
            mode,
            backend: None,
            cassette_path: None,
            retry: RetryPolicy::default(),
            in_flight: DEFAULT_IN_FLIGHT,
        }
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn cassette_path(&self) -> Option<&Path> {
        self.cassette_path.as_deref()
    }

    /// Number of requests that reached the backend (cache misses).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn complete(
        &self,
        model_id: &str,
        prompt: &str,
        params: &SamplingParams,
        sample_index: u32,
    ) -> Result<CompletionResult, GatewayError> {
        params.validate()?;
        let fp = fingerprint(model_id, prompt, params, sample_index);
        let slot = {
            let mut slots = self.slots.lock().expect("slots lock");
            slots
                .entry(fp.clone())
                .or_insert_with(|| {
                    let cached = self.cassette.lock().expect("cassette lock").get(&fp).cloned();
                    Arc::new(Mutex::new(cached))
                })
                .clone()
        };
        // Holding the slot lock makes concurrent identical requests wait for
        // the first one instead of issuing their own call.
        let mut guard = slot.lock().expect("slot lock");
        if let Some(hit) = guard.as_ref() {
            return Ok(hit.clone());
        }
        if self.mode == GatewayMode::Replay {
            return Err(GatewayError::CassetteMiss(fp));
        }
        let backend = self.backend.as_ref().ok_or(GatewayError::NoBackend)?;
        let request = ChatRequest {
            model_id,
            prompt,
            params,
            sample_index,
        };
        let result = self
            .call_with_retry(backend.as_ref(), &request)?
            .normalized(params.logprobs_top_k);
        {
            let mut cassette = self.cassette.lock().expect("cassette lock");
            cassette.insert(fp.clone(), result.clone());
            if self.mode == GatewayMode::Record {
                if let Some(path) = &self.cassette_path {
                    cassette::append(path, &fp, &result)?;
                }
            }
        }
        *guard = Some(result.clone());
        Ok(result)
    }

    fn call_with_retry(
        &self,
        backend: &dyn Backend,
        request: &ChatRequest<'_>,
    ) -> Result<CompletionResult, GatewayError> {
        let attempts = self.retry.attempts.max(1);
        let mut attempt = 0;
        loop {
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match backend.chat(request) {
                Ok(r) => return Ok(r),
                Err(e) if !e.is_retryable() => return Err(GatewayError::Fatal(e)),
                Err(e) if attempt + 1 >= attempts => return Err(GatewayError::Exhausted { attempts, source: e }),
                Err(e) => {
                    let mut wait = self.retry.delay(attempt);
                    if let BackendError::RateLimited { retry_after: Some(ra) } = &e {
                        wait = wait.max(*ra);
                    }
                    log::warn!("{} (attempt {}), retrying in {wait:?}", e, attempt + 1);
                    thread::sleep(wait);
                    attempt += 1;
                }
            }
        }
    }

    /// Draws `n` extra samples with indices `1..=n`, returned in index order.
    pub fn sample_k(
        &self,
        model_id: &str,
        prompt: &str,
        params: &SamplingParams,
        n: u32,
    ) -> Result<Vec<CompletionResult>, GatewayError> {
        if n == 0 {
            return Err(GatewayError::EmptySample);
        }
        let indices: Vec<u32> = (1..=n).collect();
        let results = self.map_concurrent(&indices, |&i| self.complete(model_id, prompt, params, i));
        results
            .into_iter()
            .zip(indices)
            .map(|(r, index)| {
                r.map_err(|e| GatewayError::SampleFailed {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// Maps `f` over `items` on the gateway's worker pool, which bounds the
    /// number of requests in flight. Output order follows input order.
    pub fn map_concurrent<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        self.pool.install(|| items.par_iter().map(&f).collect())
    }

    /// Rewrites the cassette file in canonical (fingerprint) order. No-op
    /// outside record mode.
    pub fn flush(&self) -> Result<(), GatewayError> {
        if self.mode != GatewayMode::Record {
            return Ok(());
        }
        if let Some(path) = &self.cassette_path {
            self.cassette.lock().expect("cassette lock").save(path)?;
        }
        Ok(())
    }

    pub fn cassette_len(&self) -> usize {
        self.cassette.lock().expect("cassette lock").len()
    }
}
