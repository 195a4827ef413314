//! Deterministic offline providers.
//!
//! [`MockChat`] answers from a rule table: the first rule whose regex
//! matches the user text renders its response template. Templates accept
//! regex expansion (`$1`, `${name}`), `{label}` (capture group 1, possibly
//! swapped for a wrong alternative at `error_rate`) and `{echo}` (the whole
//! user text). Every random choice is a hash of `(seed, rule, user text)`,
//! so output is a pure function of the seed and the request.

use std::time::Duration;

use async_trait::async_trait;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, EmbedBackend, GatewayError, ProviderConfig};

pub const DEFAULT_MOCK_RESPONSE: &str = "I cannot decide.";
pub const DEFAULT_MOCK_DIMENSION: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub pattern: String,
    pub response: String,
    /// Probability of replacing `{label}` with a wrong alternative.
    #[serde(default)]
    pub error_rate: f64,
    #[serde(default)]
    pub alternatives: Vec<String>,
    /// Fail the call with this HTTP-like status instead of answering.
    #[serde(default)]
    pub fail_status: Option<u16>,
}

impl MockRule {
    pub fn new(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            response: response.into(),
            error_rate: 0.0,
            alternatives: vec![],
            fail_status: None,
        }
    }

    pub fn with_noise(mut self, error_rate: f64, alternatives: Vec<String>) -> Self {
        self.error_rate = error_rate;
        self.alternatives = alternatives;
        self
    }

    pub fn failing(pattern: impl Into<String>, status: u16) -> Self {
        Self {
            fail_status: Some(status),
            ..Self::new(pattern, "")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default = "default_response")]
    pub default_response: String,
}

fn default_response() -> String {
    DEFAULT_MOCK_RESPONSE.into()
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            rules: vec![],
            default_response: default_response(),
        }
    }
}

struct CompiledRule {
    regex: Regex,
    rule: MockRule,
}

pub struct MockChat {
    seed: u64,
    rules: Vec<CompiledRule>,
    default_response: String,
}

impl MockChat {
    pub fn new(seed: u64, script: MockScript) -> Result<Self, GatewayError> {
        let rules = script
            .rules
            .into_iter()
            .map(|rule| {
                if !(0.0..=1.0).contains(&rule.error_rate) {
                    return Err(GatewayError::Config(format!(
                        "mock rule `{}`: error_rate outside [0, 1]",
                        rule.pattern
                    )));
                }
                Regex::new(&rule.pattern)
                    .map(|regex| CompiledRule { regex, rule })
                    .map_err(|e| GatewayError::Config(format!("mock rule pattern: {e}")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            seed,
            rules,
            default_response: script.default_response,
        })
    }

    pub fn from_config(config: &ProviderConfig) -> Result<Self, GatewayError> {
        Self::new(config.seed.unwrap_or(0), config.mock.clone().unwrap_or_default())
    }

    /// The response text for `user_text`, or the failure status of the
    /// matching rule.
    pub fn respond(&self, user_text: &str) -> Result<String, u16> {
        for (idx, compiled) in self.rules.iter().enumerate() {
            let Some(caps) = compiled.regex.captures(user_text) else {
                continue;
            };
            let rule = &compiled.rule;
            if let Some(status) = rule.fail_status {
                return Err(status);
            }
            let mut out = String::new();
            caps.expand(&rule.response, &mut out);
            let truth = caps.get(1).map_or("", |m| m.as_str());
            let label = self.noisy_label(idx, user_text, truth, rule);
            return Ok(out.replace("{label}", &label).replace("{echo}", user_text));
        }
        Ok(self.default_response.replace("{echo}", user_text))
    }

    fn noisy_label(&self, rule_idx: usize, user_text: &str, truth: &str, rule: &MockRule) -> String {
        if rule.error_rate <= 0.0 {
            return truth.to_string();
        }
        let salt = format!("noise/{rule_idx}");
        if unit_hash(self.seed, &salt, user_text) >= rule.error_rate {
            return truth.to_string();
        }
        let wrong: Vec<&String> = rule
            .alternatives
            .iter()
            .filter(|a| !a.trim().eq_ignore_ascii_case(truth.trim()))
            .collect();
        if wrong.is_empty() {
            return truth.to_string();
        }
        let pick = hash64(self.seed, &format!("pick/{rule_idx}"), user_text) as usize % wrong.len();
        wrong[pick].clone()
    }
}

#[async_trait]
impl ChatBackend for MockChat {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        match self.respond(&request.user_text) {
            Ok(text) => Ok(ChatResponse {
                input_tokens: whitespace_tokens(&request.system_text) + whitespace_tokens(&request.user_text),
                output_tokens: whitespace_tokens(&text),
                text,
                provider_id: String::new(),
                latency: Duration::ZERO,
            }),
            Err(status) => Err(match status {
                401 | 403 => BackendError::Auth(format!("scripted {status}")),
                408 | 429 | 500..=599 => BackendError::Transient {
                    status: Some(status),
                    message: "scripted failure".into(),
                },
                _ => BackendError::Rejected(format!("scripted {status}")),
            }),
        }
    }
}

/// Bag-of-words random projection: each token maps to a seeded Gaussian
/// vector, a text embeds as the normalised sum of its tokens' vectors.
/// Texts sharing vocabulary land close together.
pub struct MockEmbedder {
    seed: u64,
    dimension: usize,
    model_name: String,
}

impl MockEmbedder {
    pub fn new(seed: u64, dimension: usize, model_name: impl Into<String>) -> Self {
        Self {
            seed,
            dimension: dimension.max(1),
            model_name: model_name.into(),
        }
    }

    pub fn from_config(config: &ProviderConfig) -> Self {
        Self::new(
            config.seed.unwrap_or(0),
            config.dimensions.unwrap_or(DEFAULT_MOCK_DIMENSION),
            config.model_name.clone(),
        )
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let lower = text.to_lowercase();
        let mut tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            tokens.push(&lower);
        }
        let mut acc = vec![0.0f64; self.dimension];
        for token in tokens {
            let mut rng = ChaCha8Rng::seed_from_u64(hash64(self.seed, "token", token));
            for a in acc.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *a += z;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        // Values survive the float32 matrix file unchanged.
        acc.into_iter().map(|v| v as f32 as f64).collect()
    }
}

#[async_trait]
impl EmbedBackend for MockEmbedder {
    async fn embed(&self, texts: &[String]) -> Result<(Vec<Vec<f64>>, u64), BackendError> {
        let rows = texts.iter().map(|t| self.embed_text(t)).collect();
        let tokens = texts.iter().map(|t| whitespace_tokens(t)).sum();
        Ok((rows, tokens))
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }
}

pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

fn hash64(seed: u64, salt: &str, text: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((salt.len() as u64).to_le_bytes());
    h.update(salt.as_bytes());
    h.update(text.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn unit_hash(seed: u64, salt: &str, text: &str) -> f64 {
    (hash64(seed, salt, text) >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script(rules: Vec<MockRule>) -> MockScript {
        MockScript {
            rules,
            ..Default::default()
        }
    }

    #[tokio::test]
    async fn same_request_same_bytes() {
        let mock = MockChat::new(
            7,
            script(vec![MockRule::new(r"label=(\w+)", "answer <{label}>")
                .with_noise(0.5, vec!["a".into(), "b".into()])]),
        )
        .unwrap();
        let req = ChatRequest::new("sys", "text label=a");
        let one = mock.chat(&req).await.unwrap();
        let two = mock.chat(&req).await.unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn first_matching_rule_wins_with_expansion() {
        let mock = MockChat::new(
            0,
            script(vec![
                MockRule::new(r"class (\w+)", "RULE($1)"),
                MockRule::new(r".*", "fallback"),
            ]),
        )
        .unwrap();
        assert_eq!(mock.respond("about class sport").unwrap(), "RULE(sport)");
        assert_eq!(mock.respond("nothing").unwrap(), "fallback");
    }

    #[test]
    fn echo_and_default() {
        let mock = MockChat::new(0, script(vec![MockRule::new("^echo", "got: {echo}")])).unwrap();
        assert_eq!(mock.respond("echo me").unwrap(), "got: echo me");
        assert_eq!(mock.respond("other").unwrap(), DEFAULT_MOCK_RESPONSE);
    }

    #[test]
    fn noise_rate_is_respected() {
        let mock = MockChat::new(
            3,
            script(vec![MockRule::new(r"truth=(\w+)", "{label}")
                .with_noise(0.2, vec!["pos".into(), "neg".into()])]),
        )
        .unwrap();
        let wrong = (0..5000)
            .filter(|i| mock.respond(&format!("item {i} truth=pos")).unwrap() != "pos")
            .count();
        let rate = wrong as f64 / 5000.0;
        assert!((rate - 0.2).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn bad_pattern_is_config_error() {
        assert!(MockChat::new(0, script(vec![MockRule::new("(", "x")])).is_err());
    }

    #[tokio::test]
    async fn scripted_failures_classified() {
        let mock = MockChat::new(0, script(vec![MockRule::failing("boom", 503)])).unwrap();
        let err = mock.chat(&ChatRequest::new("", "boom")).await.unwrap_err();
        assert!(matches!(err, BackendError::Transient { status: Some(503), .. }));
    }

    #[tokio::test]
    async fn embeddings_shape_and_determinism() {
        let e = MockEmbedder::new(1, 16, "mock-embed");
        let (rows, tokens) = e.embed(&["a".into(), "b".into(), "a".into()]).await.unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.len() == 16));
        assert_eq!(rows[0], rows[2]);
        assert_ne!(rows[0], rows[1]);
        assert_eq!(tokens, 3);
    }

    #[test]
    fn shared_vocabulary_is_closer() {
        let e = MockEmbedder::new(9, 64, "m");
        let a = e.embed_text("goal match striker league");
        let b = e.embed_text("striker league goal season");
        let c = e.embed_text("senate vote bill election");
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        assert!(dot(&a, &b) > dot(&a, &c));
    }

    #[test]
    fn whitespace_token_count() {
        assert_eq!(whitespace_tokens("  one two\tthree\n"), 3);
        assert_eq!(whitespace_tokens(""), 0);
    }
}
