//! Uniform access to chat-completion and embedding providers.
//!
//! A [`Gateway`] wraps one chat backend with an in-flight limit, retries
//! with exponential backoff on transient failures, per-attempt timeouts and
//! a shared token [`Ledger`]. [`Embedder`] does the same for embedding
//! backends. Backends are either OpenAI-compatible HTTP endpoints or the
//! deterministic scripted mock used for offline runs.

mod http;
mod ledger;
mod mock;
mod pricing;

use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use tracing::{debug, warn};

use crate::matrix::EmbeddingMatrix;

pub use http::{FixtureTransport, HttpReply, OpenAiBackend, ReqwestTransport, Transport};
pub use ledger::{Ledger, LedgerEntry, LedgerTotals};
pub use mock::{whitespace_tokens, MockChat, MockEmbedder, MockRule, MockScript};
pub use pricing::{estimate_cost, ModelPrice, PriceSheet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("authentication failed for `{provider}`: {message}")]
    Auth { provider: String, message: String },
    #[error("`{provider}` still failing after {attempts} attempts: {last}")]
    RateLimitExhausted {
        provider: String,
        attempts: u32,
        last: String,
    },
    #[error("`{provider}` timed out after {attempts} attempts")]
    Timeout { provider: String, attempts: u32 },
    #[error("malformed response from `{provider}`: {message}")]
    MalformedResponse { provider: String, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding rows have inconsistent dimensions ({expected} vs {found})")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("`{provider}` rejected the request: {message}")]
    Rejected { provider: String, message: String },
    #[error("unknown model `{0}` in price sheet")]
    UnknownModel(String),
    #[error("invalid provider configuration: {0}")]
    Config(String),
}

impl GatewayError {
    pub fn is_resumable(&self) -> bool {
        matches!(
            self,
            GatewayError::RateLimitExhausted { .. } | GatewayError::Timeout { .. }
        )
    }
}

/// Outcome of one backend attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendError {
    /// 429, 5xx or a transport failure: retried.
    Transient { status: Option<u16>, message: String },
    Auth(String),
    Malformed(String),
    /// Anything else the provider refused; not retried.
    Rejected(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Mock,
    /// Chat completions and embeddings in the OpenAI wire format.
    OpenAi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider_id: String,
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default)]
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Requested embedding width (embedding providers only).
    #[serde(default)]
    pub dimensions: Option<usize>,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default)]
    pub mock: Option<MockScript>,
}

fn default_in_flight() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}
fn default_timeout() -> f64 {
    60.0
}
fn default_backoff_ms() -> u64 {
    500
}

impl ProviderConfig {
    pub fn mock(provider_id: impl Into<String>, seed: u64) -> Self {
        Self {
            provider_id: provider_id.into(),
            kind: ProviderKind::Mock,
            base_url: String::new(),
            model_name: "mock".into(),
            api_key_env: String::new(),
            max_in_flight: default_in_flight(),
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
            temperature: 0.0,
            seed: Some(seed),
            dimensions: None,
            backoff_base_ms: 1,
            mock: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.provider_id.trim().is_empty() {
            return Err(GatewayError::Config("provider_id is empty".into()));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config(format!(
                "{}: max_in_flight must be >= 1",
                self.provider_id
            )));
        }
        if !self.temperature.is_finite() || !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::Config(format!(
                "{}: temperature must lie in [0, 2]",
                self.provider_id
            )));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(GatewayError::Config(format!(
                "{}: timeout must be positive",
                self.provider_id
            )));
        }
        if self.kind == ProviderKind::OpenAi {
            if self.base_url.is_empty() {
                return Err(GatewayError::Config(format!(
                    "{}: base_url is required",
                    self.provider_id
                )));
            }
            if self.api_key_env.is_empty() {
                return Err(GatewayError::Config(format!(
                    "{}: api_key_env is required",
                    self.provider_id
                )));
            }
            if self.api_key_env.starts_with("sk-") || self.api_key_env.contains(char::is_whitespace) {
                return Err(GatewayError::Config(format!(
                    "{}: api_key_env must name an environment variable, not hold a key",
                    self.provider_id
                )));
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay: Duration::from_millis(self.backoff_base_ms),
            max_delay: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            max_output_tokens: 512,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.user_text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("user_text is empty".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_output_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub provider_id: String,
    #[serde(with = "duration_millis")]
    pub latency: Duration,
}

mod duration_millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    /// Single attempt, no retries.
    async fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

#[async_trait]
pub trait EmbedBackend: Send + Sync {
    /// Embeds a batch; returns rows plus the input token count.
    async fn embed(&self, texts: &[String]) -> Result<(Vec<Vec<f64>>, u64), BackendError>;
    fn model_name(&self) -> &str;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl RetryPolicy {
    fn delay(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.min(16));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Shared retry/timeout/throttle loop around a single-attempt call.
async fn with_retries<T, F, Fut>(
    provider: &str,
    limiter: &Semaphore,
    policy: RetryPolicy,
    timeout: Duration,
    mut attempt: F,
) -> Result<(T, u32), GatewayError>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Result<T, BackendError>>,
{
    let mut attempts = 0u32;
    loop {
        attempts += 1;
        let outcome = {
            let _permit = limiter.acquire().await.expect("semaphore closed");
            tokio::time::timeout(timeout, attempt()).await
        };
        let retry_reason = match outcome {
            Ok(Ok(value)) => return Ok((value, attempts)),
            Ok(Err(BackendError::Auth(message))) => {
                return Err(GatewayError::Auth {
                    provider: provider.into(),
                    message,
                })
            }
            Ok(Err(BackendError::Malformed(message))) => {
                return Err(GatewayError::MalformedResponse {
                    provider: provider.into(),
                    message,
                })
            }
            Ok(Err(BackendError::Rejected(message))) => {
                return Err(GatewayError::Rejected {
                    provider: provider.into(),
                    message,
                })
            }
            Ok(Err(BackendError::Transient { status, message })) => {
                if attempts > policy.max_retries {
                    return Err(GatewayError::RateLimitExhausted {
                        provider: provider.into(),
                        attempts,
                        last: match status {
                            Some(s) => format!("HTTP {s}: {message}"),
                            None => message,
                        },
                    });
                }
                format!("transient failure {status:?}")
            }
            Err(_) => {
                if attempts > policy.max_retries {
                    return Err(GatewayError::Timeout {
                        provider: provider.into(),
                        attempts,
                    });
                }
                "timeout".to_string()
            }
        };
        let delay = policy.delay(attempts - 1);
        warn!(provider, attempts, ?delay, reason = %retry_reason, "retrying");
        tokio::time::sleep(delay).await;
    }
}

/// Chat provider with throttling, retries and accounting.
#[derive(Clone)]
pub struct Gateway {
    provider_id: String,
    model_name: String,
    backend: Arc<dyn ChatBackend>,
    limiter: Arc<Semaphore>,
    policy: RetryPolicy,
    timeout: Duration,
    ledger: Ledger,
}

impl Gateway {
    pub fn new(config: &ProviderConfig, backend: Arc<dyn ChatBackend>, ledger: Ledger) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Self {
            provider_id: config.provider_id.clone(),
            model_name: config.model_name.clone(),
            backend,
            limiter: Arc::new(Semaphore::new(config.max_in_flight)),
            policy: config.retry_policy(),
            timeout: config.timeout(),
            ledger,
        })
    }

    /// Builds the backend named by `config.kind`. HTTP providers need their
    /// API key in the environment at this point.
    pub fn from_config(config: &ProviderConfig, ledger: Ledger) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend: Arc<dyn ChatBackend> = match config.kind {
            ProviderKind::Mock => Arc::new(MockChat::from_config(config)?),
            ProviderKind::OpenAi => Arc::new(OpenAiBackend::from_env(
                config,
                Arc::new(ReqwestTransport::new()),
            )?),
        };
        Self::new(config, backend, ledger)
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Sends `request`, returning the provider text verbatim. `stage`
    /// labels the ledger entry.
    pub async fn complete(&self, request: &ChatRequest, stage: &str) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let started = Instant::now();
        let (mut response, attempts) = with_retries(
            &self.provider_id,
            &self.limiter,
            self.policy,
            self.timeout,
            || self.backend.chat(request),
        )
        .await?;
        response.provider_id = self.provider_id.clone();
        response.latency = started.elapsed();
        debug!(provider = %self.provider_id, attempts, stage, "chat complete");
        self.ledger.record(LedgerEntry {
            provider_id: self.provider_id.clone(),
            model_name: self.model_name.clone(),
            stage: stage.to_string(),
            input_tokens: response.input_tokens,
            output_tokens: response.output_tokens,
        });
        Ok(response)
    }
}

/// Embedding provider with the same throttling and retry rules as [`Gateway`].
#[derive(Clone)]
pub struct Embedder {
    provider_id: String,
    backend: Arc<dyn EmbedBackend>,
    limiter: Arc<Semaphore>,
    policy: RetryPolicy,
    timeout: Duration,
    batch_size: usize,
    ledger: Ledger,
}

impl Embedder {
    pub fn new(config: &ProviderConfig, backend: Arc<dyn EmbedBackend>, ledger: Ledger) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Self {
            provider_id: config.provider_id.clone(),
            backend,
            limiter: Arc::new(Semaphore::new(config.max_in_flight)),
            policy: config.retry_policy(),
            timeout: config.timeout(),
            batch_size: 256,
            ledger,
        })
    }

    pub fn from_config(config: &ProviderConfig, ledger: Ledger) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend: Arc<dyn EmbedBackend> = match config.kind {
            ProviderKind::Mock => Arc::new(MockEmbedder::from_config(config)),
            ProviderKind::OpenAi => Arc::new(OpenAiBackend::from_env(
                config,
                Arc::new(ReqwestTransport::new()),
            )?),
        };
        Self::new(config, backend, ledger)
    }

    pub fn model_name(&self) -> &str {
        self.backend.model_name()
    }

    pub async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(GatewayError::InvalidRequest(format!("text {i} is empty")));
        }
        let mut rows = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            let ((batch, tokens), _) = with_retries(
                &self.provider_id,
                &self.limiter,
                self.policy,
                self.timeout,
                || self.backend.embed(chunk),
            )
            .await?;
            if batch.len() != chunk.len() {
                return Err(GatewayError::MalformedResponse {
                    provider: self.provider_id.clone(),
                    message: format!("{} rows for {} inputs", batch.len(), chunk.len()),
                });
            }
            self.ledger.record(LedgerEntry {
                provider_id: self.provider_id.clone(),
                model_name: self.backend.model_name().to_string(),
                stage: "embed".into(),
                input_tokens: tokens,
                output_tokens: 0,
            });
            rows.extend(batch);
        }
        let expected = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != expected || r.is_empty()) {
            return Err(GatewayError::DimensionMismatch {
                expected,
                found: bad.len(),
            });
        }
        Ok(rows)
    }

    /// Embeds `texts` into a raw matrix keyed by `record_ids`.
    pub async fn embed_records(&self, record_ids: &[String], texts: &[String]) -> Result<EmbeddingMatrix, GatewayError> {
        if record_ids.len() != texts.len() {
            return Err(GatewayError::InvalidRequest(
                "record_ids and texts differ in length".into(),
            ));
        }
        let rows = self.embed(texts).await?;
        EmbeddingMatrix::new(record_ids.to_vec(), rows, self.model_name(), false)
            .map_err(|e| GatewayError::MalformedResponse {
                provider: self.provider_id.clone(),
                message: e.to_string(),
            })
    }
}
