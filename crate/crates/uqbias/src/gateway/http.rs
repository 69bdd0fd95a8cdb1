//! Blocking chat-completions client that requests top-k logprobs for the
//! single answer token.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{json, Value};

use super::{GatewayError, ModelEndpoint, QueryBackend, QueryRequest, TokenLogprobs};

pub struct HttpChatModel {
    endpoint: ModelEndpoint,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpChatModel {
    /// Reads the API key from the environment variable named in the
    /// endpoint config. The key is held in memory only.
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, GatewayError> {
        let api_key = match std::env::var(&endpoint.api_key_env) {
            Ok(key) if !key.is_empty() => Some(key),
            _ if endpoint.api_key_env.is_empty() => None,
            _ => return Err(GatewayError::MissingApiKey(endpoint.api_key_env.clone())),
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(endpoint.request_timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport {
                attempts: 0,
                message: format!("building client: {e}"),
            })?;
        Ok(Self {
            endpoint,
            api_key,
            client,
        })
    }

    fn request_body(&self, request: &QueryRequest) -> Value {
        let image_url = format!(
            "data:image/png;base64,{}",
            BASE64.encode(&request.image_png)
        );
        json!({
            "model": self.endpoint.model_name,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": request.text},
                    {"type": "image_url", "image_url": {"url": image_url}},
                ],
            }],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": 1,
            "logprobs": true,
            "top_logprobs": self.endpoint.top_logprobs_k,
        })
    }

    fn attempt(&self, body: &Value) -> Result<TokenLogprobs, AttemptError> {
        let url = format!(
            "{}/chat/completions",
            self.endpoint.base_url.trim_end_matches('/')
        );
        let mut builder = self.client.post(&url).json(body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| AttemptError::Transient(format!("request failed: {e}")))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| AttemptError::Transient(format!("reading body: {e}")))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Transient(format!("http {status}: {text}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(format!("http {status}: {text}")));
        }
        parse_chat_completion(&text).map_err(AttemptError::Fatal)
    }
}

enum AttemptError {
    /// Worth retrying: connection trouble, 429, 5xx.
    Transient(String),
    /// The endpoint answered definitively; retrying will not help.
    Fatal(String),
}

/// Extracts the first-position top-k logprobs and the sampled token from a
/// chat-completions response body.
pub(crate) fn parse_chat_completion(body: &str) -> Result<TokenLogprobs, String> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| format!("response is not JSON: {e}"))?;
    let first = value
        .pointer("/choices/0/logprobs/content/0")
        .ok_or("response carries no logprobs for the first token")?;
    let sampled_token = first
        .get("token")
        .and_then(Value::as_str)
        .ok_or("first logprob entry has no token")?
        .to_string();
    let raw_top = first
        .get("top_logprobs")
        .and_then(Value::as_array)
        .ok_or("first logprob entry has no top_logprobs")?;
    let mut top = Vec::with_capacity(raw_top.len());
    let mut seen = std::collections::HashSet::new();
    for entry in raw_top {
        let token = entry
            .get("token")
            .and_then(Value::as_str)
            .ok_or("top_logprobs entry has no token")?;
        let logprob = entry
            .get("logprob")
            .and_then(Value::as_f64)
            .ok_or("top_logprobs entry has no logprob")?;
        // Keep the first occurrence; tokens must stay distinct.
        if seen.insert(token.to_string()) {
            top.push((token.to_string(), logprob.min(0.0)));
        }
    }
    if top.is_empty() {
        return Err("top_logprobs is empty".to_string());
    }
    Ok(TokenLogprobs { sampled_token, top })
}

impl QueryBackend for HttpChatModel {
    fn model_tag(&self) -> String {
        format!("{}@{}", self.endpoint.model_name, self.endpoint.base_url)
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn query(&self, request: &QueryRequest) -> Result<TokenLogprobs, GatewayError> {
        let body = self.request_body(request);
        let attempts = self.endpoint.max_retries.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.attempt(&body) {
                Ok(reply) => return Ok(reply),
                Err(AttemptError::Fatal(message)) => {
                    return Err(GatewayError::Protocol(message));
                }
                Err(AttemptError::Transient(message)) => {
                    last = message;
                    if attempt + 1 < attempts {
                        std::thread::sleep(backoff(attempt));
                    }
                }
            }
        }
        Err(GatewayError::Transport {
            attempts,
            message: last,
        })
    }
}

/// Exponential backoff with jitter derived from the clock.
fn backoff(attempt: u32) -> std::time::Duration {
    let base_ms = 500u64.saturating_mul(1 << attempt.min(6));
    let jitter = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.subsec_millis() as u64)
        .unwrap_or(0)
        % (base_ms / 2 + 1);
    std::time::Duration::from_millis(base_ms + jitter)
}
