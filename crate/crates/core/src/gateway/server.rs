//! HTTP front for [`MockBackend`], speaking the chat-completion wire format.
//!
//! The scripted key is carried in three request headers. Real endpoints
//! ignore them.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use super::{BackendFailure, ChatRequestBody, GatewayError, MockBackend, SampleKey};

pub const KEY_HEADER_QUERY: &str = "x-a2r-query-id";
pub const KEY_HEADER_SAMPLE: &str = "x-a2r-sample-index";
pub const KEY_HEADER_STAGE: &str = "x-a2r-stage";

fn error_body(status: StatusCode, kind: &str, message: String) -> (StatusCode, Json<Value>) {
    (
        status,
        Json(json!({ "error": { "type": kind, "message": message } })),
    )
}

fn key_from_headers(headers: &HeaderMap) -> Result<SampleKey, String> {
    let get = |name: &str| {
        headers
            .get(name)
            .and_then(|v| v.to_str().ok())
            .ok_or_else(|| format!("missing header {name}"))
    };
    let query_id = get(KEY_HEADER_QUERY)?.to_string();
    let sample_index = get(KEY_HEADER_SAMPLE)?
        .parse()
        .map_err(|e| format!("bad {KEY_HEADER_SAMPLE}: {e}"))?;
    let stage = get(KEY_HEADER_STAGE)?.parse()?;
    Ok(SampleKey::new(query_id, sample_index, stage))
}

async fn chat_completions(
    State(backend): State<Arc<MockBackend>>,
    headers: HeaderMap,
    Json(body): Json<ChatRequestBody>,
) -> (StatusCode, Json<Value>) {
    let key = match key_from_headers(&headers) {
        Ok(k) => k,
        Err(e) => return error_body(StatusCode::BAD_REQUEST, "invalid_request_error", e),
    };
    match backend.lookup(&key) {
        Ok(entry) => {
            let mut resp = json!({
                "object": "chat.completion",
                "model": body.model,
                "choices": [{
                    "index": 0,
                    "message": { "role": "assistant", "content": entry.text },
                    "finish_reason": "stop"
                }]
            });
            if !entry.omit_usage {
                resp["usage"] = json!({
                    "prompt_tokens": entry.input_tokens,
                    "completion_tokens": entry.output_tokens,
                    "total_tokens": entry.input_tokens + entry.output_tokens
                });
            }
            (StatusCode::OK, Json(resp))
        }
        Err(BackendFailure::Transient(msg)) => {
            error_body(StatusCode::SERVICE_UNAVAILABLE, "server_error", msg)
        }
        Err(BackendFailure::Fatal(e @ GatewayError::MockScriptMiss(_))) => {
            error_body(StatusCode::NOT_FOUND, "mock_script_miss", e.to_string())
        }
        Err(BackendFailure::Fatal(e)) => {
            error_body(StatusCode::INTERNAL_SERVER_ERROR, "server_error", e.to_string())
        }
    }
}

pub fn mock_router(backend: Arc<MockBackend>) -> Router {
    Router::new()
        .route("/chat/completions", post(chat_completions))
        .route("/v1/chat/completions", post(chat_completions))
        .with_state(backend)
}

/// Binds `addr` and serves the scripted backend in a background task.
pub async fn serve_mock(
    backend: Arc<MockBackend>,
    addr: SocketAddr,
) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = mock_router(backend);
    let handle = tokio::spawn(async move { axum::serve(listener, app).await });
    Ok((local, handle))
}
