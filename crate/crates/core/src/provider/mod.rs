//! Provider-agnostic chat completion.
//!
//! Three implementations share the [`CompletionProvider`] trait: a live HTTP
//! client ([`HttpProvider`]), a scripted fixture set ([`ScriptedProvider`])
//! and a record/replay pair ([`RecordingProvider`], [`ReplayProvider`]).
//! Every call is a fresh single-turn exchange. Providers never panic or
//! return errors from `complete`: transport problems come back as a response
//! with [`FinishReason::TransportError`].

mod http;
mod replay;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::stage::Stage;

pub use http::{
    ConcurrencyLimiter, HttpProvider, HttpProviderConfig, HttpReply, HttpTransport, UreqTransport,
};
pub use replay::{RecordedExchange, Recording, RecordingProvider, ReplayProvider};
pub use scripted::{ScriptEntry, ScriptedProvider, SCRIPT_INDEX_FILE};

/// Meta key carrying `"false"` when a transport error must not be retried.
pub const META_RETRYABLE: &str = "retryable";
/// Meta key carrying a server-requested delay in milliseconds.
pub const META_RETRY_AFTER_MS: &str = "retry_after_ms";

#[derive(Debug, Error, PartialEq)]
pub enum ProviderError {
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("cannot load provider fixtures: {0}")]
    Fixture(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt_text: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub stage: Stage,
    /// Entity ids the prompt was rendered for, e.g. `M01/G03` or `HE007`.
    pub subject: String,
    pub attempt: u32,
}

impl CompletionRequest {
    pub fn new(
        prompt_text: impl Into<String>,
        model_id: impl Into<String>,
        temperature: f64,
        max_output_tokens: u32,
        stage: Stage,
        subject: impl Into<String>,
        attempt: u32,
    ) -> Result<Self, ProviderError> {
        let req = Self {
            prompt_text: prompt_text.into(),
            model_id: model_id.into(),
            temperature,
            max_output_tokens,
            stage,
            subject: subject.into(),
            attempt,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |m: &str| Err(ProviderError::InvalidRequest(m.to_string()));
        if self.attempt < 1 {
            return bad("attempt must be at least 1");
        }
        if self.prompt_text.trim().is_empty() {
            return bad("prompt text is empty");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must lie in [0, 2]");
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the prompt text; part of the replay key.
    pub fn prompt_digest(&self) -> String {
        sha256_hex(&self.prompt_text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Complete,
    Truncated,
    Refused,
    TransportError,
}

impl fmt::Display for FinishReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinishReason::Complete => "complete",
            FinishReason::Truncated => "truncated",
            FinishReason::Refused => "refused",
            FinishReason::TransportError => "transport_error",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResponse {
    pub raw_text: String,
    pub finish_reason: FinishReason,
    pub latency: Duration,
    pub provider_meta: BTreeMap<String, String>,
}

impl CompletionResponse {
    /// An empty `complete` answer is reported as `refused`.
    pub fn new(raw_text: impl Into<String>, finish_reason: FinishReason, latency: Duration) -> Self {
        let raw_text = raw_text.into();
        let finish_reason = if finish_reason == FinishReason::Complete && raw_text.is_empty() {
            FinishReason::Refused
        } else {
            finish_reason
        };
        Self {
            raw_text,
            finish_reason,
            latency,
            provider_meta: BTreeMap::new(),
        }
    }

    pub fn complete(raw_text: impl Into<String>) -> Self {
        Self::new(raw_text, FinishReason::Complete, Duration::ZERO)
    }

    pub fn transport_error(diagnostic: impl Into<String>, retryable: bool) -> Self {
        let mut resp = Self::new(diagnostic, FinishReason::TransportError, Duration::ZERO);
        resp.provider_meta
            .insert(META_RETRYABLE.into(), retryable.to_string());
        resp
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.provider_meta.insert(key.to_string(), value.into());
        self
    }

    pub fn is_retryable(&self) -> bool {
        self.finish_reason == FinishReason::TransportError
            && self.provider_meta.get(META_RETRYABLE).map(String::as_str) != Some("false")
    }

    fn retry_after(&self) -> Option<Duration> {
        self.provider_meta
            .get(META_RETRY_AFTER_MS)
            .and_then(|ms| ms.parse().ok())
            .map(Duration::from_millis)
    }
}

/// What a run intends to call, checked before any pipeline work.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbePlan {
    pub stages: Vec<Stage>,
    pub model_id: String,
}

impl ProbePlan {
    pub fn all_stages(model_id: impl Into<String>) -> Self {
        Self {
            stages: Stage::ALL.to_vec(),
            model_id: model_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadinessIssue {
    /// `missing-fixture`, `auth`, `unreachable`, `config`
    pub code: String,
    pub stage: Option<Stage>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Readiness {
    pub provider: String,
    pub issues: Vec<ReadinessIssue>,
}

impl Readiness {
    pub fn ready(provider: impl Into<String>) -> Self {
        Self {
            provider: provider.into(),
            issues: Vec::new(),
        }
    }

    pub fn is_ready(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn issue(&mut self, code: &str, stage: Option<Stage>, detail: impl Into<String>) {
        self.issues.push(ReadinessIssue {
            code: code.to_string(),
            stage,
            detail: detail.into(),
        });
    }

    pub fn missing_stages(&self) -> Vec<Stage> {
        self.issues.iter().filter_map(|i| i.stage).collect()
    }
}

impl fmt::Display for Readiness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ready() {
            return write!(f, "{}: ready", self.provider);
        }
        write!(f, "{}: not ready", self.provider)?;
        for issue in &self.issues {
            write!(f, "\n  [{}] {}", issue.code, issue.detail)?;
        }
        Ok(())
    }
}

pub trait CompletionProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Exactly one response per call.
    fn complete(&self, request: &CompletionRequest) -> CompletionResponse;

    fn probe(&self, plan: &ProbePlan) -> Readiness;
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for &P {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, request: &CompletionRequest) -> CompletionResponse {
        (**self).complete(request)
    }

    fn probe(&self, plan: &ProbePlan) -> Readiness {
        (**self).probe(plan)
    }
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&self, request: &CompletionRequest) -> CompletionResponse {
        (**self).complete(request)
    }

    fn probe(&self, plan: &ProbePlan) -> Readiness {
        (**self).probe(plan)
    }
}

/// Exponential backoff for transport errors: `base_delay * 2^(retry-1)`,
/// capped at `max_delay`, and never shorter than a server-requested delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn delay_for(&self, retry: u32) -> Duration {
        let factor = 1u64 << retry.saturating_sub(1).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// One try of a logical call, as seen by the retry loop.
#[derive(Debug, Clone)]
pub struct Attempted {
    pub response: CompletionResponse,
    /// Served from a recording: no need to wait before the next try.
    pub replayed: bool,
}

/// Runs `try_once(retry)` until it yields something other than a retryable
/// transport error or `policy.max_retries` retries are spent. The last
/// response is returned either way.
pub fn call_with_retry<E>(
    policy: &RetryPolicy,
    mut try_once: impl FnMut(u32) -> Result<Attempted, E>,
    mut sleep: impl FnMut(Duration),
) -> Result<CompletionResponse, E> {
    let mut retry = 0;
    loop {
        let attempted = try_once(retry)?;
        if !attempted.response.is_retryable() || retry >= policy.max_retries {
            return Ok(attempted.response);
        }
        retry += 1;
        if !attempted.replayed {
            let mut delay = policy.delay_for(retry);
            if let Some(asked) = attempted.response.retry_after() {
                delay = delay.max(asked.min(Duration::from_millis(policy.max_delay_ms)));
            }
            sleep(delay);
        }
    }
}

/// Wraps a provider and counts calls per stage and concurrent calls.
pub struct CountingProvider<P> {
    inner: P,
    calls: Mutex<BTreeMap<Stage, usize>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl<P: CompletionProvider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: Mutex::new(BTreeMap::new()),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self, stage: Stage) -> usize {
        self.calls.lock().unwrap().get(&stage).copied().unwrap_or(0)
    }

    pub fn total_calls(&self) -> usize {
        self.calls.lock().unwrap().values().sum()
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: CompletionProvider> CompletionProvider for CountingProvider<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &CompletionRequest) -> CompletionResponse {
        *self.calls.lock().unwrap().entry(request.stage).or_default() += 1;
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let response = self.inner.complete(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        response
    }

    fn probe(&self, plan: &ProbePlan) -> Readiness {
        self.inner.probe(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        assert!(CompletionRequest::new("p", "m", 0.0, 1, Stage::Hazards, "item", 0).is_err());
        assert!(CompletionRequest::new(" ", "m", 0.0, 1, Stage::Hazards, "item", 1).is_err());
        assert!(CompletionRequest::new("p", "m", 2.5, 1, Stage::Hazards, "item", 1).is_err());
        assert!(CompletionRequest::new("p", "m", 2.0, 0, Stage::Hazards, "item", 1).is_err());
        assert!(CompletionRequest::new("p", "m", 2.0, 1, Stage::Hazards, "item", 1).is_ok());
    }

    #[test]
    fn empty_complete_becomes_refused() {
        assert_eq!(CompletionResponse::complete("").finish_reason, FinishReason::Refused);
        assert_eq!(CompletionResponse::complete("x").finish_reason, FinishReason::Complete);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            base_delay_ms: 100,
            max_delay_ms: 350,
        };
        let delays: Vec<u64> = (1..=4).map(|r| p.delay_for(r).as_millis() as u64).collect();
        assert_eq!(delays, vec![100, 200, 350, 350]);
    }

    #[test]
    fn retry_bound_respected() {
        let policy = RetryPolicy {
            max_retries: 2,
            base_delay_ms: 10,
            max_delay_ms: 1000,
        };
        let mut tries = Vec::new();
        let mut slept = Vec::new();
        let resp = call_with_retry::<()>(
            &policy,
            |retry| {
                tries.push(retry);
                Ok(Attempted {
                    response: CompletionResponse::transport_error("down", true),
                    replayed: false,
                })
            },
            |d| slept.push(d),
        )
        .unwrap();
        assert_eq!(resp.finish_reason, FinishReason::TransportError);
        assert_eq!(tries, vec![0, 1, 2]);
        assert_eq!(slept, vec![Duration::from_millis(10), Duration::from_millis(20)]);
    }

    #[test]
    fn non_retryable_and_success_stop_immediately() {
        let policy = RetryPolicy::default();
        let mut n = 0;
        call_with_retry::<()>(
            &policy,
            |_| {
                n += 1;
                Ok(Attempted {
                    response: CompletionResponse::transport_error("missing", false),
                    replayed: false,
                })
            },
            |_| panic!("no sleep expected"),
        )
        .unwrap();
        assert_eq!(n, 1);

        let mut n = 0;
        let resp = call_with_retry::<()>(
            &policy,
            |retry| {
                n += 1;
                let response = if retry == 0 {
                    CompletionResponse::transport_error("503", true)
                } else {
                    CompletionResponse::complete("ok")
                };
                Ok(Attempted { response, replayed: true })
            },
            |_| panic!("replayed tries do not sleep"),
        )
        .unwrap();
        assert_eq!((n, resp.raw_text.as_str()), (2, "ok"));
    }

    #[test]
    fn retry_after_extends_delay() {
        let policy = RetryPolicy {
            max_retries: 1,
            base_delay_ms: 10,
            max_delay_ms: 5_000,
        };
        let mut slept = Vec::new();
        let mut first = true;
        call_with_retry::<()>(
            &policy,
            |_| {
                let response = if std::mem::take(&mut first) {
                    CompletionResponse::transport_error("429", true).with_meta(META_RETRY_AFTER_MS, "2000")
                } else {
                    CompletionResponse::complete("ok")
                };
                Ok(Attempted { response, replayed: false })
            },
            |d| slept.push(d),
        )
        .unwrap();
        assert_eq!(slept, vec![Duration::from_millis(2000)]);
    }
}
