//! OpenAI-compatible chat and embedding endpoints.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, EmbedBackend, GatewayError, ProviderConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// One HTTP POST with a JSON body. Transport errors are reported as text.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, String>;
}

pub struct ReqwestTransport {
    client: reqwest::Client,
}

impl ReqwestTransport {
    pub fn new() -> Self {
        Self {
            client: reqwest::Client::new(),
        }
    }
}

impl Default for ReqwestTransport {
    fn default() -> Self {
        Self::new()
    }
}

#[async_trait]
impl Transport for ReqwestTransport {
    async fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, String> {
        let mut req = self.client.post(url).json(body).timeout(timeout);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().await.map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().await.map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

/// Replays recorded replies in order, ignoring the request. Used to test
/// the wire format against captured provider responses.
pub struct FixtureTransport {
    replies: std::sync::Mutex<std::collections::VecDeque<HttpReply>>,
    requests: std::sync::Mutex<Vec<Value>>,
}

impl FixtureTransport {
    pub fn new(replies: Vec<HttpReply>) -> Self {
        Self {
            replies: std::sync::Mutex::new(replies.into()),
            requests: Default::default(),
        }
    }

    /// Loads a JSON array of `{status, body}` objects; `body` may be a
    /// string or inline JSON.
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let raw: Vec<Value> =
            serde_json::from_str(&text).map_err(|e| GatewayError::Config(format!("fixture: {e}")))?;
        let replies = raw
            .into_iter()
            .map(|v| {
                let status = v["status"].as_u64().unwrap_or(200) as u16;
                let body = match &v["body"] {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                HttpReply { status, body }
            })
            .collect();
        Ok(Self::new(replies))
    }

    pub fn requests(&self) -> Vec<Value> {
        self.requests.lock().unwrap().clone()
    }
}

#[async_trait]
impl Transport for FixtureTransport {
    async fn post_json(&self, _: &str, _: Option<&str>, body: &Value, _: Duration) -> Result<HttpReply, String> {
        self.requests.lock().unwrap().push(body.clone());
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| "fixture exhausted".to_string())
    }
}

pub struct OpenAiBackend {
    base_url: String,
    model_name: String,
    temperature: f64,
    seed: Option<u64>,
    dimensions: Option<usize>,
    timeout: Duration,
    api_key: Option<String>,
    transport: Arc<dyn Transport>,
}

impl OpenAiBackend {
    /// Resolves the API key from `config.api_key_env`.
    pub fn from_env(config: &ProviderConfig, transport: Arc<dyn Transport>) -> Result<Self, GatewayError> {
        let key = std::env::var(&config.api_key_env).map_err(|_| GatewayError::Auth {
            provider: config.provider_id.clone(),
            message: format!("environment variable `{}` is not set", config.api_key_env),
        })?;
        if key.trim().is_empty() {
            return Err(GatewayError::Auth {
                provider: config.provider_id.clone(),
                message: format!("environment variable `{}` is empty", config.api_key_env),
            });
        }
        Ok(Self::with_key(config, Some(key), transport))
    }

    pub fn with_key(config: &ProviderConfig, api_key: Option<String>, transport: Arc<dyn Transport>) -> Self {
        Self {
            base_url: config.base_url.trim_end_matches('/').to_string(),
            model_name: config.model_name.clone(),
            temperature: config.temperature,
            seed: config.seed,
            dimensions: config.dimensions,
            timeout: config.timeout(),
            api_key,
            transport,
        }
    }

    async fn post(&self, path: &str, body: Value) -> Result<Value, BackendError> {
        let url = format!("{}/{}", self.base_url, path);
        let reply = self
            .transport
            .post_json(&url, self.api_key.as_deref(), &body, self.timeout)
            .await
            .map_err(|message| BackendError::Transient { status: None, message })?;
        match reply.status {
            200..=299 => serde_json::from_str(&reply.body)
                .map_err(|e| BackendError::Malformed(format!("invalid JSON: {e}"))),
            401 | 403 => Err(BackendError::Auth(truncate(&reply.body))),
            408 | 409 | 429 | 500..=599 => Err(BackendError::Transient {
                status: Some(reply.status),
                message: truncate(&reply.body),
            }),
            s => Err(BackendError::Rejected(format!("HTTP {s}: {}", truncate(&reply.body)))),
        }
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(300).collect()
}

fn token_field(v: &Value, key: &str) -> u64 {
    v["usage"][key].as_u64().unwrap_or(0)
}

#[async_trait]
impl ChatBackend for OpenAiBackend {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut messages = Vec::new();
        if !request.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_text}));
        }
        messages.push(json!({"role": "user", "content": request.user_text}));
        let mut body = json!({
            "model": self.model_name,
            "messages": messages,
            "max_tokens": request.max_output_tokens,
            "temperature": self.temperature,
        });
        if let Some(seed) = self.seed {
            body["seed"] = json!(seed);
        }
        let v = self.post("chat/completions", body).await?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))?;
        Ok(ChatResponse {
            text: text.to_string(),
            input_tokens: token_field(&v, "prompt_tokens"),
            output_tokens: token_field(&v, "completion_tokens"),
            provider_id: String::new(),
            latency: Duration::ZERO,
        })
    }
}

#[async_trait]
impl EmbedBackend for OpenAiBackend {
    async fn embed(&self, texts: &[String]) -> Result<(Vec<Vec<f64>>, u64), BackendError> {
        let mut body = json!({"model": self.model_name, "input": texts});
        if let Some(d) = self.dimensions {
            body["dimensions"] = json!(d);
        }
        let v = self.post("embeddings", body).await?;
        let data = v["data"]
            .as_array()
            .ok_or_else(|| BackendError::Malformed("missing data array".into()))?;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item["index"].as_u64().map_or(pos, |i| i as usize);
            let vec = item["embedding"]
                .as_array()
                .ok_or_else(|| BackendError::Malformed("missing embedding".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| BackendError::Malformed("non-numeric embedding".into())))
                .collect::<Result<Vec<f64>, _>>()?;
            rows.push((index, vec));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok((rows.into_iter().map(|(_, v)| v).collect(), token_field(&v, "prompt_tokens")))
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, Ledger, ProviderKind};

    fn config() -> ProviderConfig {
        ProviderConfig {
            kind: ProviderKind::OpenAi,
            base_url: "https://api.example.invalid/v1/".into(),
            model_name: "gpt-3.5-turbo".into(),
            api_key_env: "LABELKIT_TEST_KEY_UNSET".into(),
            backoff_base_ms: 1,
            ..ProviderConfig::mock("openai", 0)
        }
    }

    fn chat_body(text: &str) -> String {
        json!({
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 4}
        })
        .to_string()
    }

    fn reply(status: u16, body: &str) -> HttpReply {
        HttpReply {
            status,
            body: body.into(),
        }
    }

    #[tokio::test]
    async fn two_rate_limits_then_success() {
        let transport = Arc::new(FixtureTransport::new(vec![
            reply(429, "rate limited"),
            reply(429, "rate limited"),
            reply(200, &chat_body("The answer is <business>.")),
        ]));
        let mut cfg = config();
        cfg.max_retries = 3;
        let backend = Arc::new(OpenAiBackend::with_key(&cfg, Some("k".into()), transport.clone()));
        let gw = Gateway::new(&cfg, backend, Ledger::default()).unwrap();
        let resp = gw.complete(&ChatRequest::new("s", "u"), "test").await.unwrap();
        assert_eq!(resp.text, "The answer is <business>.");
        assert_eq!(transport.requests().len(), 3);
        assert_eq!((resp.input_tokens, resp.output_tokens), (12, 4));
        let sent = &transport.requests()[0];
        assert_eq!(sent["model"], "gpt-3.5-turbo");
        assert_eq!(sent["messages"][1]["content"], "u");
        assert_eq!(gw.ledger().totals().calls, 1);
    }

    #[tokio::test]
    async fn auth_failure_not_retried() {
        let transport = Arc::new(FixtureTransport::new(vec![reply(401, "bad key")]));
        let cfg = config();
        let backend = Arc::new(OpenAiBackend::with_key(&cfg, Some("k".into()), transport.clone()));
        let gw = Gateway::new(&cfg, backend, Ledger::default()).unwrap();
        let err = gw.complete(&ChatRequest::new("", "u"), "t").await.unwrap_err();
        assert!(matches!(err, GatewayError::Auth { .. }));
        assert_eq!(transport.requests().len(), 1);
    }

    #[tokio::test]
    async fn malformed_body() {
        let transport = Arc::new(FixtureTransport::new(vec![reply(200, r#"{"choices": []}"#)]));
        let cfg = config();
        let backend = OpenAiBackend::with_key(&cfg, None, transport);
        assert!(matches!(
            backend.chat(&ChatRequest::new("", "u")).await,
            Err(BackendError::Malformed(_))
        ));
    }

    #[test]
    fn missing_key_is_auth_error() {
        let err = OpenAiBackend::from_env(&config(), Arc::new(ReqwestTransport::new()))
            .err()
            .unwrap();
        assert!(matches!(err, GatewayError::Auth { .. }));
    }

    #[tokio::test]
    async fn embedding_rows_follow_index() {
        let body = json!({
            "data": [
                {"index": 1, "embedding": [0.0, 1.0]},
                {"index": 0, "embedding": [1.0, 0.0]}
            ],
            "usage": {"prompt_tokens": 2}
        })
        .to_string();
        let transport = Arc::new(FixtureTransport::new(vec![reply(200, &body)]));
        let backend = OpenAiBackend::with_key(&config(), None, transport);
        let (rows, tokens) = backend.embed(&["a".into(), "b".into()]).await.unwrap();
        assert_eq!(rows, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(tokens, 2);
    }
}
