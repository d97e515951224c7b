//! Client for a chat-style generation endpoint.
//!
//! Request: `{model, messages: [{role, content}], temperature, logprobs,
//! score_continuation?}`. Response: `{text, token_logprobs?}`. Label scoring
//! sends the prompt with a forced continuation `PROGNOSIS: <Label>` and sums
//! the returned per-token log-probabilities.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendCapabilities, GenerationBackend, GenerationError, LabelScores};
use crate::limit::InFlightLimiter;
use crate::model::UnifiedLabel;
use crate::prompting::GenerationInput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteChatConfig {
    pub url: String,
    #[serde(default)]
    pub api_key: Option<String>,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Whether the endpoint honours `score_continuation`.
    #[serde(default = "default_true")]
    pub supports_label_scoring: bool,
}

fn default_timeout() -> u64 {
    60
}

fn default_in_flight() -> usize {
    2
}

fn default_true() -> bool {
    true
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<Message<'a>>,
    temperature: f64,
    logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    score_continuation: Option<String>,
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    text: String,
    #[serde(default)]
    token_logprobs: Option<Vec<f64>>,
}

pub struct RemoteChatBackend {
    config: RemoteChatConfig,
    client: reqwest::blocking::Client,
    limiter: InFlightLimiter,
}

impl RemoteChatBackend {
    pub fn new(config: RemoteChatConfig) -> Result<Self, GenerationError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GenerationError::Transport { message: e.to_string(), retriable: false })?;
        let limiter = InFlightLimiter::new(config.max_in_flight);
        Ok(RemoteChatBackend { config, client, limiter })
    }

    fn call(&self, input: &GenerationInput, continuation: Option<String>) -> Result<ChatResponse, GenerationError> {
        let rendered = input.render();
        let body = ChatRequest {
            model: &self.config.model,
            messages: vec![Message { role: "user", content: &rendered }],
            temperature: self.config.temperature,
            logprobs: continuation.is_some(),
            score_continuation: continuation,
        };
        let _permit = self.limiter.acquire();
        let mut req = self.client.post(&self.config.url).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| GenerationError::Transport {
            message: format!("{}: {e}", self.config.url),
            retriable: e.is_timeout() || e.is_connect(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(GenerationError::Transport {
                message: format!("{} returned {status}", self.config.url),
                retriable: status.is_server_error() || status.as_u16() == 429,
            });
        }
        resp.json().map_err(|e| GenerationError::Transport { message: format!("malformed response: {e}"), retriable: false })
    }
}

impl GenerationBackend for RemoteChatBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            supports_label_scoring: self.config.supports_label_scoring,
            deterministic: self.config.temperature == 0.0,
            name: format!("remote:{}", self.config.model),
            max_in_flight: self.limiter.max(),
        }
    }

    fn generate(&self, input: &GenerationInput) -> Result<String, GenerationError> {
        Ok(self.call(input, None)?.text)
    }

    fn score_labels(&self, input: &GenerationInput) -> Result<LabelScores, GenerationError> {
        if !self.config.supports_label_scoring {
            return Err(GenerationError::Unsupported { backend: self.capabilities().name, capability: "label scoring" });
        }
        let mut values = [0.0; 4];
        for label in UnifiedLabel::ALL {
            let resp = self.call(input, Some(format!("PROGNOSIS: {label}")))?;
            let lp = resp
                .token_logprobs
                .filter(|v| !v.is_empty())
                .ok_or_else(|| GenerationError::InvalidScores(format!("no token log-probabilities for {label}")))?;
            values[label.index()] = lp.iter().sum();
        }
        LabelScores::new(values)
    }
}
