//! Uniform access to chat-completion endpoints.
//!
//! A [`Gateway`] wraps one [`Backend`] together with its [`EndpointConfig`].
//! It enforces the endpoint's in-flight limit, retries transient failures
//! with jittered exponential backoff and captures token usage. Backends are
//! looked up by name in a [`BackendRegistry`], so an endpoint file can select
//! `"http"` or `"mock"` at runtime.

mod http;
mod mock;
mod server;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::answer::{RawCompletion, ThinkMarkers};
use crate::registry::Registry;

pub use http::{ChatRequestBody, HttpBackend, API_KEY_ENV};
pub use mock::{MockBackend, MockEntry, MockScript};
pub use server::{mock_router, serve_mock, KEY_HEADER_QUERY, KEY_HEADER_SAMPLE, KEY_HEADER_STAGE};

/// Default sampling temperature for explorer and synthesizer calls.
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

/// Multiplier applied to whitespace token counts when an endpoint omits usage.
pub const ESTIMATE_FACTOR: f64 = 1.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("endpoint unreachable after {attempts} attempt(s): {last_error}")]
    EndpointUnreachable { attempts: u32, last_error: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("endpoint rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("no scripted completion for {0}")]
    MockScriptMiss(SampleKey),
    #[error("empty request batch")]
    EmptyBatch,
    #[error("request has no messages")]
    EmptyMessages,
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("unknown backend '{0}'")]
    UnknownBackend(String),
    #[error("mock script line {line}: {message}")]
    ScriptParse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

/// Outcome of a single backend attempt that did not produce a reply.
#[derive(Debug, Clone)]
pub enum BackendFailure {
    /// Worth retrying: timeouts, connection errors, 429/5xx, scripted faults.
    Transient(String),
    Fatal(GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Explorer,
    Synthesizer,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Explorer => "explorer",
            Stage::Synthesizer => "synthesizer",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "explorer" => Ok(Stage::Explorer),
            "synthesizer" => Ok(Stage::Synthesizer),
            other => Err(format!("unknown stage '{other}'")),
        }
    }
}

/// Identifies one sampled completion: which query, which sample, which stage.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleKey {
    pub query_id: String,
    pub sample_index: u64,
    pub stage: Stage,
}

impl SampleKey {
    pub fn new(query_id: impl Into<String>, sample_index: u64, stage: Stage) -> Self {
        Self {
            query_id: query_id.into(),
            sample_index,
            stage,
        }
    }
}

impl fmt::Display for SampleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.query_id, self.sample_index, self.stage.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub seed: u64,
    pub key: SampleKey,
}

/// Input/output token counts for one or more calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Set when the counts were estimated rather than reported by the endpoint.
    #[serde(default)]
    pub estimated: bool,
}

impl TokenUsage {
    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        Self {
            input_tokens,
            output_tokens,
            estimated: false,
        }
    }

    pub fn estimate(messages: &[ChatMessage], output: &str) -> Self {
        let words = |s: &str| s.split_whitespace().count() as f64;
        let input: f64 = messages.iter().map(|m| words(&m.content)).sum();
        Self {
            input_tokens: (input * ESTIMATE_FACTOR).ceil() as u64,
            output_tokens: (words(output) * ESTIMATE_FACTOR).ceil() as u64,
            estimated: true,
        }
    }
}

impl std::ops::Add for TokenUsage {
    type Output = TokenUsage;

    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage {
            input_tokens: self.input_tokens + rhs.input_tokens,
            output_tokens: self.output_tokens + rhs.output_tokens,
            estimated: self.estimated || rhs.estimated,
        }
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = TokenUsage>>(iter: I) -> Self {
        iter.fold(TokenUsage::default(), |a, b| a + b)
    }
}

/// What a backend returns for one attempt. Missing fields are handled by the gateway.
#[derive(Debug, Clone, Default)]
pub struct BackendReply {
    pub text: Option<String>,
    pub usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub completion: RawCompletion,
    pub usage: TokenUsage,
    pub latency: Duration,
    pub attempt: u32,
}

fn default_backend() -> String {
    "http".to_string()
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_max_tokens() -> u32 {
    32_768
}
fn default_timeout_ms() -> u64 {
    600_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_concurrency() -> usize {
    8
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Registered backend name, `"http"` or `"mock"` by default.
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default)]
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_concurrency")]
    pub concurrency_limit: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    /// Whether to forward the per-sample seed in the request body.
    #[serde(default = "default_true")]
    pub send_seed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
    #[serde(default)]
    pub think_markers: ThinkMarkers,
}

impl EndpointConfig {
    pub fn new(backend: &str, model_name: &str) -> Self {
        Self {
            backend: backend.to_string(),
            base_url: String::new(),
            model_name: model_name.to_string(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: default_max_tokens(),
            request_timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            concurrency_limit: default_concurrency(),
            backoff_base_ms: default_backoff_ms(),
            send_seed: true,
            mock_script: None,
            think_markers: ThinkMarkers::default(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.concurrency_limit == 0 {
            return Err(GatewayError::InvalidConfig("concurrency_limit must be >= 1".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidConfig(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidConfig("max_tokens must be positive".into()));
        }
        if self.model_name.is_empty() {
            return Err(GatewayError::InvalidConfig("model_name is empty".into()));
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| GatewayError::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One way of turning a request into a completion.
#[async_trait]
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    async fn send(
        &self,
        endpoint: &EndpointConfig,
        request: &CompletionRequest,
    ) -> Result<BackendReply, BackendFailure>;
}

pub type BackendFactory =
    Arc<dyn Fn(&EndpointConfig) -> Result<Arc<dyn Backend>, GatewayError> + Send + Sync>;

pub type BackendRegistry = Registry<BackendFactory>;

/// Registry with the built-in `http` and `mock` backends.
pub fn default_backends() -> BackendRegistry {
    let mut registry = BackendRegistry::new();
    registry.register(
        "http",
        Arc::new(|cfg: &EndpointConfig| {
            let backend = HttpBackend::from_env(cfg)?;
            Ok(Arc::new(backend) as Arc<dyn Backend>)
        }) as BackendFactory,
    );
    registry.register(
        "mock",
        Arc::new(|cfg: &EndpointConfig| {
            let path = cfg.mock_script.as_ref().ok_or_else(|| {
                GatewayError::InvalidConfig("mock backend requires mock_script".into())
            })?;
            let script = MockScript::from_jsonl_file(path)?;
            Ok(Arc::new(MockBackend::new(script)) as Arc<dyn Backend>)
        }) as BackendFactory,
    );
    registry
}

/// A backend bound to an endpoint configuration and its in-flight limit.
#[derive(Clone)]
pub struct Gateway {
    endpoint: Arc<EndpointConfig>,
    backend: Arc<dyn Backend>,
    permits: Arc<Semaphore>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("endpoint", &self.endpoint)
            .field("backend", &self.backend.name())
            .finish()
    }
}

impl Gateway {
    pub fn new(endpoint: EndpointConfig, backend: Arc<dyn Backend>) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        let permits = Arc::new(Semaphore::new(endpoint.concurrency_limit));
        Ok(Self {
            endpoint: Arc::new(endpoint),
            backend,
            permits,
        })
    }

    /// Builds the backend named in `endpoint.backend` from `registry`.
    pub fn from_registry(
        endpoint: EndpointConfig,
        registry: &BackendRegistry,
    ) -> Result<Self, GatewayError> {
        let factory = registry
            .get(&endpoint.backend)
            .ok_or_else(|| GatewayError::UnknownBackend(endpoint.backend.clone()))?;
        let backend = factory(&endpoint)?;
        Self::new(endpoint, backend)
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.endpoint.backoff_base_ms as f64 * 2f64.powi(attempt as i32 - 1);
        let jitter: f64 = rand::rng().random_range(0.5..1.5);
        Duration::from_secs_f64(base * jitter / 1000.0)
    }

    pub async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        if request.messages.is_empty() {
            return Err(GatewayError::EmptyMessages);
        }
        let max_attempts = self.endpoint.max_retries + 1;
        let started = Instant::now();
        let mut last_error = String::new();

        for attempt in 1..=max_attempts {
            let outcome = {
                let _permit = self
                    .permits
                    .acquire()
                    .await
                    .expect("gateway semaphore is never closed");
                tokio::time::timeout(
                    self.endpoint.request_timeout(),
                    self.backend.send(&self.endpoint, request),
                )
                .await
            };

            match outcome {
                Ok(Ok(reply)) => return self.finish(request, reply, started, attempt),
                Ok(Err(BackendFailure::Fatal(e))) => return Err(e),
                Ok(Err(BackendFailure::Transient(msg))) => last_error = msg,
                Err(_) => {
                    last_error = format!("timed out after {:?}", self.endpoint.request_timeout())
                }
            }
            tracing::debug!(key = %request.key, attempt, error = %last_error, "transient failure");
            if attempt < max_attempts {
                tokio::time::sleep(self.backoff(attempt)).await;
            }
        }

        Err(GatewayError::EndpointUnreachable {
            attempts: max_attempts,
            last_error,
        })
    }

    fn finish(
        &self,
        request: &CompletionRequest,
        reply: BackendReply,
        started: Instant,
        attempt: u32,
    ) -> Result<CompletionResult, GatewayError> {
        let text = reply
            .text
            .ok_or_else(|| GatewayError::MalformedResponse("response has no message content".into()))?;
        let usage = reply
            .usage
            .unwrap_or_else(|| TokenUsage::estimate(&request.messages, &text));
        Ok(CompletionResult {
            completion: RawCompletion::with_markers(text, &self.endpoint.think_markers),
            usage,
            latency: started.elapsed(),
            attempt,
        })
    }

    /// Issues all requests concurrently, bounded by the endpoint's in-flight
    /// limit. Result `i` always belongs to request `i`.
    pub async fn complete_many(
        &self,
        requests: &[CompletionRequest],
    ) -> Result<Vec<Result<CompletionResult, GatewayError>>, GatewayError> {
        if requests.is_empty() {
            return Err(GatewayError::EmptyBatch);
        }
        Ok(futures::future::join_all(requests.iter().map(|r| self.complete(r))).await)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock_gateway(lines: &str, limit: usize) -> (Gateway, Arc<MockBackend>) {
        let script = MockScript::from_jsonl_str(lines).unwrap();
        let backend = Arc::new(MockBackend::new(script));
        let mut cfg = EndpointConfig::new("mock", "m");
        cfg.concurrency_limit = limit;
        cfg.backoff_base_ms = 1;
        cfg.max_retries = 2;
        (Gateway::new(cfg, backend.clone()).unwrap(), backend)
    }

    fn req(q: &str, i: u64) -> CompletionRequest {
        CompletionRequest {
            messages: vec![ChatMessage::user("hi")],
            seed: i,
            key: SampleKey::new(q, i, Stage::Explorer),
        }
    }

    #[tokio::test]
    async fn scripted_lookup() {
        let (gw, _) = mock_gateway(
            r#"{"query_id":"q1","sample_index":0,"stage":"explorer","text":"so \\boxed{7}","input_tokens":10,"output_tokens":20}"#,
            2,
        );
        let r = gw.complete(&req("q1", 0)).await.unwrap();
        assert_eq!(r.completion.text, "so \\boxed{7}");
        assert_eq!(r.usage, TokenUsage::new(10, 20));
        assert_eq!(r.attempt, 1);
    }

    #[tokio::test]
    async fn transient_then_success() {
        let (gw, backend) = mock_gateway(
            r#"{"query_id":"q1","sample_index":0,"stage":"explorer","text":"x","input_tokens":1,"output_tokens":1,"fail_times":1}"#,
            1,
        );
        let r = gw.complete(&req("q1", 0)).await.unwrap();
        assert_eq!(r.attempt, 2);
        assert_eq!(backend.calls(Stage::Explorer), 2);
    }

    #[tokio::test]
    async fn exhausted_retries() {
        let (gw, _) = mock_gateway(
            r#"{"query_id":"q1","sample_index":0,"stage":"explorer","text":"x","input_tokens":1,"output_tokens":1,"fail_times":9}"#,
            1,
        );
        let err = gw.complete(&req("q1", 0)).await.unwrap_err();
        assert!(matches!(err, GatewayError::EndpointUnreachable { attempts: 3, .. }));
    }

    #[tokio::test]
    async fn unscripted_key_misses() {
        let (gw, _) = mock_gateway("", 1);
        let err = gw.complete(&req("nope", 0)).await.unwrap_err();
        assert_eq!(
            err,
            GatewayError::MockScriptMiss(SampleKey::new("nope", 0, Stage::Explorer))
        );
    }

    #[tokio::test]
    async fn empty_batch_rejected() {
        let (gw, _) = mock_gateway("", 1);
        assert_eq!(gw.complete_many(&[]).await.unwrap_err(), GatewayError::EmptyBatch);
    }

    #[tokio::test]
    async fn missing_usage_is_estimated() {
        let (gw, _) = mock_gateway(
            r#"{"query_id":"q","sample_index":0,"stage":"explorer","text":"one two three","omit_usage":true}"#,
            1,
        );
        let r = gw.complete(&req("q", 0)).await.unwrap();
        assert!(r.usage.estimated);
        // "hi" -> ceil(1.3) = 2; three words -> ceil(3.9) = 4
        assert_eq!((r.usage.input_tokens, r.usage.output_tokens), (2, 4));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EndpointConfig::new("mock", "m");
        cfg.concurrency_limit = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = EndpointConfig::new("mock", "m");
        cfg.temperature = 2.5;
        assert!(cfg.validate().is_err());
        let cfg: EndpointConfig = serde_json::from_str(r#"{"model_name":"x"}"#).unwrap();
        assert_eq!(cfg.temperature, 0.7);
        assert_eq!(cfg.backend, "http");
        assert_eq!(cfg.backoff_base_ms, 500);
    }
}
