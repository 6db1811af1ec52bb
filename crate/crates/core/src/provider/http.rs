use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    CompletionProvider, CompletionRequest, CompletionResponse, FinishReason, ProbePlan,
    ProviderError, Readiness, META_RETRY_AFTER_MS,
};

/// Settings for an OpenAI-compatible chat-completions endpoint. The
/// credential itself is never part of the config: only the name of the
/// environment variable that holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpProviderConfig {
    pub endpoint: String,
    pub credential_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout() -> u64 {
    120
}

fn default_in_flight() -> usize {
    4
}

impl HttpProviderConfig {
    pub fn new(endpoint: impl Into<String>, credential_env: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            credential_env: credential_env.into(),
            timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
    pub retry_after: Option<Duration>,
}

/// Sends one JSON POST. `Err` means no HTTP status was obtained.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: &str, body: &str) -> Result<HttpReply, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: &str, body: &str) -> Result<HttpReply, String> {
        let mut response = self
            .agent
            .post(url)
            .header("Authorization", format!("Bearer {bearer}"))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let retry_after = response
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        Ok(HttpReply {
            status,
            body,
            retry_after,
        })
    }
}

/// Counting semaphore capping concurrent requests.
pub struct ConcurrencyLimiter {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a ConcurrencyLimiter,
}

impl ConcurrencyLimiter {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.max {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        Permit { limiter: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limiter.used.lock().unwrap() -= 1;
        self.limiter.freed.notify_one();
    }
}

pub struct HttpProvider {
    config: HttpProviderConfig,
    credential: Option<String>,
    transport: Box<dyn HttpTransport>,
    limiter: ConcurrencyLimiter,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider")
            .field("config", &self.config)
            .field("credential", &self.credential.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpProvider {
    /// Reads the credential from the configured environment variable. A
    /// missing credential is not an error here; `probe` reports it.
    pub fn from_env(config: HttpProviderConfig) -> Result<Self, ProviderError> {
        let credential = std::env::var(&config.credential_env).ok().filter(|v| !v.is_empty());
        let transport = Box::new(UreqTransport::new(Duration::from_secs(config.timeout_secs)));
        Self::with_transport(config, credential, transport)
    }

    pub fn with_transport(
        config: HttpProviderConfig,
        credential: Option<String>,
        transport: Box<dyn HttpTransport>,
    ) -> Result<Self, ProviderError> {
        if !config.endpoint.starts_with("http://") && !config.endpoint.starts_with("https://") {
            return Err(ProviderError::Config(format!(
                "endpoint {:?} is not an http(s) URL",
                config.endpoint
            )));
        }
        if config.credential_env.trim().is_empty() {
            return Err(ProviderError::Config("credential_env is empty".into()));
        }
        let limiter = ConcurrencyLimiter::new(config.max_in_flight);
        Ok(Self {
            config,
            credential,
            transport,
            limiter,
        })
    }

    fn missing_credential(&self) -> String {
        format!(
            "credential environment variable {} is not set",
            self.config.credential_env
        )
    }

    fn send(&self, body: &serde_json::Value) -> Result<HttpReply, String> {
        let bearer = self.credential.as_deref().unwrap_or_default();
        let _permit = self.limiter.acquire();
        self.transport
            .post_json(&self.config.endpoint, bearer, &body.to_string())
    }
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<Choice>,
    #[serde(default)]
    model: Option<String>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

fn map_finish(reason: Option<&str>) -> FinishReason {
    match reason {
        Some("length") => FinishReason::Truncated,
        Some("content_filter") => FinishReason::Refused,
        _ => FinishReason::Complete,
    }
}

fn clip(text: &str) -> String {
    let clipped: String = text.chars().take(300).collect();
    clipped.replace(['\n', '\r'], " ")
}

impl CompletionProvider for HttpProvider {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &CompletionRequest) -> CompletionResponse {
        if self.credential.is_none() {
            return CompletionResponse::transport_error(self.missing_credential(), false);
        }
        let body = json!({
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        let started = Instant::now();
        let reply = match self.send(&body) {
            Ok(reply) => reply,
            Err(e) => return CompletionResponse::transport_error(format!("network: {e}"), true),
        };
        let latency = started.elapsed();
        let status = reply.status;
        let mut response = match status {
            200..=299 => match serde_json::from_str::<ChatReply>(&reply.body) {
                Ok(parsed) if !parsed.choices.is_empty() => {
                    let choice = &parsed.choices[0];
                    let text = choice.message.content.clone().unwrap_or_default();
                    let mut r = CompletionResponse::new(
                        text,
                        map_finish(choice.finish_reason.as_deref()),
                        latency,
                    );
                    if let Some(model) = parsed.model {
                        r = r.with_meta("model", model);
                    }
                    r
                }
                _ => CompletionResponse::transport_error(
                    format!("malformed provider reply: {}", clip(&reply.body)),
                    true,
                ),
            },
            401 | 403 => CompletionResponse::transport_error(
                format!("authentication rejected (HTTP {status})"),
                false,
            ),
            429 => {
                let mut r = CompletionResponse::transport_error("rate limited (HTTP 429)", true);
                if let Some(after) = reply.retry_after {
                    r = r.with_meta(META_RETRY_AFTER_MS, after.as_millis().to_string());
                }
                r
            }
            500..=599 => CompletionResponse::transport_error(
                format!("server error (HTTP {status}): {}", clip(&reply.body)),
                true,
            ),
            _ => CompletionResponse::transport_error(
                format!("request rejected (HTTP {status}): {}", clip(&reply.body)),
                false,
            ),
        };
        response.latency = latency;
        response.with_meta("http_status", status.to_string())
    }

    fn probe(&self, plan: &ProbePlan) -> Readiness {
        let mut readiness = Readiness::ready(self.name());
        if self.credential.is_none() {
            readiness.issue("auth", None, self.missing_credential());
            return readiness;
        }
        let body = json!({
            "model": plan.model_id,
            "messages": [{"role": "user", "content": "ping"}],
            "max_tokens": 1,
        });
        match self.send(&body) {
            Err(e) => readiness.issue("unreachable", None, format!("{}: {e}", self.config.endpoint)),
            Ok(reply) => match reply.status {
                200..=299 | 429 => {}
                401 | 403 => readiness.issue(
                    "auth",
                    None,
                    format!("credential rejected (HTTP {})", reply.status),
                ),
                404 => readiness.issue(
                    "config",
                    None,
                    format!("endpoint or model {:?} not found (HTTP 404)", plan.model_id),
                ),
                s => readiness.issue("unreachable", None, format!("HTTP {s}: {}", clip(&reply.body))),
            },
        }
        readiness
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage::Stage;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Canned {
        replies: Mutex<Vec<Result<HttpReply, String>>>,
        bodies: Mutex<Vec<String>>,
    }

    impl Canned {
        fn new(replies: Vec<Result<HttpReply, String>>) -> Arc<Self> {
            Arc::new(Self {
                replies: Mutex::new(replies),
                bodies: Mutex::new(Vec::new()),
            })
        }
    }

    impl HttpTransport for Arc<Canned> {
        fn post_json(&self, _url: &str, _bearer: &str, body: &str) -> Result<HttpReply, String> {
            self.bodies.lock().unwrap().push(body.to_string());
            self.replies.lock().unwrap().remove(0)
        }
    }

    fn ok(body: &str) -> Result<HttpReply, String> {
        Ok(HttpReply {
            status: 200,
            body: body.into(),
            retry_after: None,
        })
    }

    fn status(code: u16) -> Result<HttpReply, String> {
        Ok(HttpReply {
            status: code,
            body: "{}".into(),
            retry_after: Some(Duration::from_secs(3)),
        })
    }

    fn provider(t: Arc<Canned>, cred: Option<&str>) -> HttpProvider {
        HttpProvider::with_transport(
            HttpProviderConfig::new("https://example.invalid/v1/chat/completions", "TEST_KEY"),
            cred.map(str::to_string),
            Box::new(t),
        )
        .unwrap()
    }

    fn req() -> CompletionRequest {
        CompletionRequest::new("hello", "m-1", 0.0, 64, Stage::Hazards, "item", 1).unwrap()
    }

    #[test]
    fn maps_success_and_finish_reasons() {
        let t = Canned::new(vec![
            ok(r#"{"model":"m-1","choices":[{"message":{"content":"A,B"},"finish_reason":"stop"}]}"#),
            ok(r#"{"choices":[{"message":{"content":"A,"},"finish_reason":"length"}]}"#),
            ok(r#"{"choices":[{"message":{"content":null},"finish_reason":"content_filter"}]}"#),
        ]);
        let p = provider(t.clone(), Some("k"));
        let r = p.complete(&req());
        assert_eq!((r.raw_text.as_str(), r.finish_reason), ("A,B", FinishReason::Complete));
        assert_eq!(r.provider_meta["model"], "m-1");
        assert_eq!(p.complete(&req()).finish_reason, FinishReason::Truncated);
        assert_eq!(p.complete(&req()).finish_reason, FinishReason::Refused);
        let sent: serde_json::Value = serde_json::from_str(&t.bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["messages"][0]["content"], "hello");
        assert_eq!(sent["max_tokens"], 64);
        assert_eq!(sent["temperature"], 0.0);
    }

    #[test]
    fn classifies_errors() {
        let t = Canned::new(vec![
            status(429),
            status(503),
            status(401),
            status(400),
            Err("connection refused".into()),
            ok("not json"),
        ]);
        let p = provider(t, Some("k"));
        let r = p.complete(&req());
        assert!(r.is_retryable());
        assert_eq!(r.provider_meta[META_RETRY_AFTER_MS], "3000");
        assert!(p.complete(&req()).is_retryable());
        assert!(!p.complete(&req()).is_retryable());
        assert!(!p.complete(&req()).is_retryable());
        assert!(p.complete(&req()).is_retryable());
        let r = p.complete(&req());
        assert_eq!(r.finish_reason, FinishReason::TransportError);
    }

    #[test]
    fn missing_credential_never_sends() {
        let t = Canned::new(vec![]);
        let p = provider(t.clone(), None);
        let r = p.complete(&req());
        assert!(!r.is_retryable());
        assert!(r.raw_text.contains("TEST_KEY"));
        let readiness = p.probe(&ProbePlan::all_stages("m"));
        assert_eq!(readiness.issues[0].code, "auth");
        assert!(t.bodies.lock().unwrap().is_empty());
        assert!(!format!("{p:?}").contains("k\""));
    }

    #[test]
    fn probe_outcomes() {
        let plan = ProbePlan::all_stages("m");
        let code = |reply| {
            let p = provider(Canned::new(vec![reply]), Some("k"));
            p.probe(&plan).issues.first().map(|i| i.code.clone())
        };
        assert_eq!(code(ok("{}")), None);
        assert_eq!(code(status(401)).as_deref(), Some("auth"));
        assert_eq!(code(status(404)).as_deref(), Some("config"));
        assert_eq!(code(Err("dns".into())).as_deref(), Some("unreachable"));
    }

    #[test]
    fn rejects_non_http_endpoint() {
        let r = HttpProvider::with_transport(
            HttpProviderConfig::new("ftp://x", "K"),
            None,
            Box::new(Canned::new(vec![])),
        );
        assert!(matches!(r, Err(ProviderError::Config(_))));
    }

    #[test]
    fn limiter_caps_concurrency() {
        let limiter = ConcurrencyLimiter::new(2);
        let inside = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _p = limiter.acquire();
                    let now = inside.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    inside.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert!(peak.load(Ordering::SeqCst) >= 1);
    }
}
