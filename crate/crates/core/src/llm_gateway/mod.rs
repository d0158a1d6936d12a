//! Blocking client for chat-completion style HTTP endpoints.
//!
//! Requests go to `{base_url}/chat/completions` with a bearer token and a
//! `{"model", "messages", "temperature"}` body; the reply's
//! `choices[0].message.content` is returned as plain text. 429, 5xx and
//! transport failures are retried with jittered exponential backoff.
//!
//! The API key is never logged and is scrubbed from every error message.

pub mod stub;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

/// Environment variable holding the API key.
pub const API_KEY_ENV: &str = "SOCIALGEN_API_KEY";

/// Log targets of the HTTP stack that dump raw wire bytes (request headers
/// included) at trace level. Log sinks should cap these at debug.
pub const WIRE_DUMP_TARGETS: &[&str] = &["ureq_proto"];

const BACKOFF_BASE: Duration = Duration::from_secs(1);
const BACKOFF_FACTOR: f64 = 2.0;
const BACKOFF_JITTER: f64 = 0.2;

#[derive(Clone, Default, PartialEq, Eq)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Self {
        Self(key.into())
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()).map(Self)
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(***)")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub base_url: String,
    pub model: String,
    #[serde(skip)]
    pub api_key: ApiKey,
    /// seconds
    pub timeout: f64,
    pub max_retries: u32,
    pub temperature: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key: ApiKey::default(),
            timeout: 30.0,
            max_retries: 3,
            temperature: 0.2,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return Err(GatewayError::InvalidConfig(format!("timeout must be positive, got {}", self.timeout)));
        }
        if self.base_url.is_empty() {
            return Err(GatewayError::InvalidConfig("base_url is empty".into()));
        }
        Ok(())
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
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

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid gateway config: {0}")]
    InvalidConfig(String),
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: usize },
    #[error("server error HTTP {status} after {attempts} attempts")]
    Server { status: u16, attempts: usize },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { message: String, attempts: usize },
    #[error("unexpected HTTP status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

/// Raw HTTP reply.
#[derive(Debug, Clone, PartialEq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// Sends one POST. Implementations report connect/timeout failures as `Err`.
pub trait Transport: Send + Sync {
    fn post(&self, url: &str, bearer: &str, body: &str, timeout: Duration) -> Result<HttpReply, String>;
}

/// Blocking HTTP transport backed by `ureq`.
#[derive(Debug, Default, Clone, Copy)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn post(&self, url: &str, bearer: &str, body: &str, timeout: Duration) -> Result<HttpReply, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let response = agent
            .post(url)
            .header("Authorization", &format!("Bearer {bearer}"))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response.into_body().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

/// Source of backoff sleeps; swapped for a recording fake in tests.
pub trait Clock: Send + Sync {
    fn sleep(&self, duration: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Records requested sleeps without blocking.
#[derive(Debug, Default)]
pub struct FakeClock {
    sleeps: Mutex<Vec<Duration>>,
}

impl FakeClock {
    pub fn sleeps(&self) -> Vec<Duration> {
        self.sleeps.lock().unwrap().clone()
    }
}

impl Clock for FakeClock {
    fn sleep(&self, duration: Duration) {
        self.sleeps.lock().unwrap().push(duration);
    }
}

/// Nominal (unjittered) delay before retry number `retry` (1-based).
pub fn backoff_delay(retry: u32) -> Duration {
    BACKOFF_BASE.mul_f64(BACKOFF_FACTOR.powi(retry.saturating_sub(1) as i32))
}

fn scrub(text: &str, key: &ApiKey) -> String {
    if key.is_empty() {
        text.to_string()
    } else {
        text.replace(key.expose(), "***")
    }
}

fn truncate(text: &str, max: usize) -> String {
    if text.len() <= max {
        return text.to_string();
    }
    let mut end = max;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}...", &text[..end])
}

pub struct ChatClient {
    config: GatewayConfig,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    jitter: Mutex<ChaCha8Rng>,
    attempts: AtomicUsize,
}

impl fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatClient").field("config", &self.config).finish_non_exhaustive()
    }
}

impl ChatClient {
    pub fn new(config: GatewayConfig) -> Self {
        Self::with_parts(config, Arc::new(HttpTransport), Arc::new(SystemClock))
    }

    pub fn with_parts(config: GatewayConfig, transport: Arc<dyn Transport>, clock: Arc<dyn Clock>) -> Self {
        Self {
            config,
            transport,
            clock,
            jitter: Mutex::new(ChaCha8Rng::from_os_rng()),
            attempts: AtomicUsize::new(0),
        }
    }

    /// Makes jitter reproducible.
    pub fn with_jitter_seed(self, seed: u64) -> Self {
        *self.jitter.lock().unwrap() = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Total HTTP attempts made by this client so far.
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::Relaxed)
    }

    fn jittered(&self, retry: u32) -> Duration {
        let u: f64 = self.jitter.lock().unwrap().random_range(-BACKOFF_JITTER..=BACKOFF_JITTER);
        backoff_delay(retry).mul_f64(1.0 + u)
    }

    /// Sends `messages` and returns the first choice's content.
    pub fn chat(&self, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        self.config.validate()?;
        if messages.is_empty() {
            return Err(GatewayError::InvalidConfig("no messages to send".into()));
        }
        if let Some(m) = messages.iter().find(|m| m.content.is_empty()) {
            return Err(GatewayError::InvalidConfig(format!("empty {:?} message", m.role)));
        }
        let key = &self.config.api_key;
        let url = self.config.endpoint();
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        })
        .to_string();
        let timeout = Duration::from_secs_f64(self.config.timeout);

        let mut attempt = 0usize;
        loop {
            attempt += 1;
            self.attempts.fetch_add(1, Ordering::Relaxed);
            log::debug!("POST {} (attempt {attempt})", scrub(&url, key));
            let retryable = match self.transport.post(&url, key.expose(), &body, timeout) {
                Ok(reply) => match reply.status {
                    200..=299 => return extract_content(&reply.body).map_err(|e| GatewayError::MalformedResponse(scrub(&e, key))),
                    401 | 403 => return Err(GatewayError::Auth { status: reply.status }),
                    429 => GatewayError::RateLimited { attempts: attempt },
                    500..=599 => GatewayError::Server { status: reply.status, attempts: attempt },
                    status => {
                        return Err(GatewayError::Http { status, body: scrub(&truncate(&reply.body, 200), key) });
                    }
                },
                Err(message) => GatewayError::Transport { message: scrub(&message, key), attempts: attempt },
            };
            if attempt > self.config.max_retries as usize {
                log::warn!("chat request failed: {retryable}");
                return Err(retryable);
            }
            let delay = self.jittered(attempt as u32);
            log::debug!("retrying after {delay:?}: {retryable}");
            self.clock.sleep(delay);
        }
    }
}

/// One-shot convenience wrapper over [`ChatClient`].
pub fn chat(config: &GatewayConfig, messages: &[ChatMessage]) -> Result<String, GatewayError> {
    ChatClient::new(config.clone()).chat(messages)
}

fn extract_content(body: &str) -> Result<String, String> {
    let value: Value = serde_json::from_str(body).map_err(|e| format!("invalid JSON ({e}): {}", truncate(body, 200)))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| format!("missing choices[0].message.content in {}", truncate(body, 200)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    struct Scripted {
        replies: Mutex<VecDeque<Result<HttpReply, String>>>,
        bodies: Mutex<Vec<String>>,
    }

    impl Scripted {
        fn new(replies: Vec<Result<HttpReply, String>>) -> Arc<Self> {
            Arc::new(Self { replies: Mutex::new(replies.into()), bodies: Mutex::new(vec![]) })
        }
    }

    impl Transport for Scripted {
        fn post(&self, _: &str, _: &str, body: &str, _: Duration) -> Result<HttpReply, String> {
            self.bodies.lock().unwrap().push(body.to_string());
            self.replies.lock().unwrap().pop_front().expect("script exhausted")
        }
    }

    fn ok(content: &str) -> Result<HttpReply, String> {
        Ok(HttpReply { status: 200, body: json!({"choices": [{"message": {"content": content}}]}).to_string() })
    }

    fn status(code: u16) -> Result<HttpReply, String> {
        Ok(HttpReply { status: code, body: "{}".into() })
    }

    fn client(t: Arc<Scripted>, clock: Arc<FakeClock>, retries: u32) -> ChatClient {
        let config = GatewayConfig { api_key: ApiKey::new("sk-secret-123"), max_retries: retries, ..Default::default() };
        ChatClient::with_parts(config, t, clock).with_jitter_seed(9)
    }

    #[test]
    fn returns_content_and_sends_wire_body() {
        let t = Scripted::new(vec![ok("ok")]);
        let c = client(t.clone(), Arc::new(FakeClock::default()), 3);
        assert_eq!(c.chat(&[ChatMessage::user("hi")]).unwrap(), "ok");
        let body: Value = serde_json::from_str(&t.bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["temperature"], 0.2);
        assert!(body.get("model").is_some());
    }

    #[test]
    fn retries_server_errors_with_backoff() {
        let t = Scripted::new(vec![status(500), status(503), ok("done")]);
        let clock = Arc::new(FakeClock::default());
        let c = client(t, clock.clone(), 3);
        assert_eq!(c.chat(&[ChatMessage::user("x")]).unwrap(), "done");
        assert_eq!(c.attempts(), 3);
        let sleeps = clock.sleeps();
        assert_eq!(sleeps.len(), 2);
        for (i, s) in sleeps.iter().enumerate() {
            let nominal = backoff_delay(i as u32 + 1).as_secs_f64();
            let got = s.as_secs_f64();
            assert!(got >= nominal * 0.8 - 1e-9 && got <= nominal * 1.2 + 1e-9, "{got} vs {nominal}");
        }
        assert_eq!(backoff_delay(1), Duration::from_secs(1));
        assert_eq!(backoff_delay(3), Duration::from_secs(4));
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let t = Scripted::new(vec![status(401)]);
        let c = client(t, Arc::new(FakeClock::default()), 3);
        assert_eq!(c.chat(&[ChatMessage::user("x")]), Err(GatewayError::Auth { status: 401 }));
        assert_eq!(c.attempts(), 1);
    }

    #[test]
    fn attempts_are_bounded() {
        let t = Scripted::new(vec![status(429), status(429), status(429)]);
        let c = client(t, Arc::new(FakeClock::default()), 2);
        assert_eq!(c.chat(&[ChatMessage::user("x")]), Err(GatewayError::RateLimited { attempts: 3 }));
        assert_eq!(c.attempts(), 3);

        let t = Scripted::new(vec![Err("connection refused".into())]);
        let c = client(t, Arc::new(FakeClock::default()), 0);
        assert!(matches!(c.chat(&[ChatMessage::user("x")]), Err(GatewayError::Transport { attempts: 1, .. })));
    }

    #[test]
    fn missing_content_is_malformed() {
        let t = Scripted::new(vec![Ok(HttpReply { status: 200, body: r#"{"choices": []}"#.into() })]);
        let c = client(t, Arc::new(FakeClock::default()), 3);
        assert!(matches!(c.chat(&[ChatMessage::user("x")]), Err(GatewayError::MalformedResponse(_))));
    }

    #[test]
    fn key_is_scrubbed_from_errors_and_debug() {
        let t = Scripted::new(vec![Err("proxy said: Bearer sk-secret-123 invalid".into())]);
        let c = client(t, Arc::new(FakeClock::default()), 0);
        let err = c.chat(&[ChatMessage::user("x")]).unwrap_err().to_string();
        assert!(!err.contains("sk-secret-123"), "{err}");
        assert!(!format!("{c:?}").contains("sk-secret-123"));
    }

    #[test]
    fn invalid_inputs_rejected() {
        let c = client(Scripted::new(vec![]), Arc::new(FakeClock::default()), 0);
        assert!(c.chat(&[]).is_err());
        assert!(c.chat(&[ChatMessage::user("")]).is_err());
        let bad = GatewayConfig { timeout: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
