use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{
    server::{KEY_HEADER_QUERY, KEY_HEADER_SAMPLE, KEY_HEADER_STAGE},
    Backend, BackendFailure, BackendReply, ChatMessage, CompletionRequest, EndpointConfig,
    GatewayError, TokenUsage,
};

/// Environment variable holding the bearer token for HTTP endpoints.
pub const API_KEY_ENV: &str = "A2R_API_KEY";

/// Request body for `POST {base_url}/chat/completions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequestBody {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct ChatResponseBody {
    #[serde(default)]
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<UsageBlock>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    message: Option<MessageBody>,
}

#[derive(Debug, Deserialize)]
struct MessageBody {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct UsageBlock {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// Chat-completion client over HTTP.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(endpoint: &EndpointConfig, api_key: Option<String>) -> Result<Self, GatewayError> {
        if endpoint.base_url.is_empty() {
            return Err(GatewayError::InvalidConfig("http backend requires base_url".into()));
        }
        let client = reqwest::Client::builder()
            .timeout(endpoint.request_timeout())
            .build()
            .map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
        Ok(Self { client, api_key })
    }

    pub fn from_env(endpoint: &EndpointConfig) -> Result<Self, GatewayError> {
        Self::new(endpoint, std::env::var(API_KEY_ENV).ok())
    }

    fn url(endpoint: &EndpointConfig) -> String {
        format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'))
    }
}

#[async_trait]
impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    async fn send(
        &self,
        endpoint: &EndpointConfig,
        request: &CompletionRequest,
    ) -> Result<BackendReply, BackendFailure> {
        let body = ChatRequestBody {
            model: endpoint.model_name.clone(),
            messages: request.messages.clone(),
            temperature: endpoint.temperature,
            max_tokens: endpoint.max_tokens,
            seed: endpoint.send_seed.then_some(request.seed),
        };
        let mut builder = self
            .client
            .post(Self::url(endpoint))
            .header(KEY_HEADER_QUERY, &request.key.query_id)
            .header(KEY_HEADER_SAMPLE, request.key.sample_index.to_string())
            .header(KEY_HEADER_STAGE, request.key.stage.as_str())
            .json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }

        let response = builder
            .send()
            .await
            .map_err(|e| BackendFailure::Transient(e.to_string()))?;
        let status = response.status();
        let bytes = response
            .bytes()
            .await
            .map_err(|e| BackendFailure::Transient(e.to_string()))?;

        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendFailure::Transient(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(BackendFailure::Fatal(GatewayError::Rejected {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&bytes).into_owned(),
            }));
        }

        let parsed: ChatResponseBody = serde_json::from_slice(&bytes)
            .map_err(|e| BackendFailure::Fatal(GatewayError::MalformedResponse(e.to_string())))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message)
            .and_then(|m| m.content);
        let usage = parsed
            .usage
            .map(|u| TokenUsage::new(u.prompt_tokens, u.completion_tokens));
        Ok(BackendReply { text, usage })
    }
}
