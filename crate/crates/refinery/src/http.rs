//! OpenAI-compatible HTTP backends.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backend::{ChatBackend, ChatMessage, EmbeddingBackend};
use crate::error::{BackendError, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// Base URL; `/chat/completions` and `/embeddings` are appended.
    pub base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: String,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    /// First retry delay; each further retry doubles it.
    pub retry_base_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            chat_model: "gpt-4o-mini".into(),
            embedding_model: "text-embedding-3-small".into(),
            auth_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
            max_in_flight: 4,
            retry_base_ms: 500,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        if self.timeout_secs == 0 {
            return Err(Error::Config("timeout_secs must be positive".into()));
        }
        Ok(())
    }

    /// Reads the bearer token; a missing variable is a configuration error.
    pub fn token(&self) -> Result<String> {
        std::env::var(&self.auth_env).map_err(|_| {
            Error::Config(format!("environment variable {} is not set", self.auth_env))
        })
    }
}

#[derive(Debug, Clone)]
struct Client {
    agent: ureq::Agent,
    base_url: String,
    token: String,
}

impl Client {
    fn new(cfg: &BackendConfig) -> Result<Self> {
        cfg.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            base_url: cfg.base_url.trim_end_matches('/').to_string(),
            token: cfg.token()?,
        })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = format!("{}{path}", self.base_url);
        let mut resp = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.token))
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Response(format!("invalid JSON: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct HttpChat {
    client: Client,
    model: String,
}

impl HttpChat {
    pub fn new(cfg: &BackendConfig) -> Result<Self> {
        Ok(Self {
            client: Client::new(cfg)?,
            model: cfg.chat_model.clone(),
        })
    }
}

impl ChatBackend for HttpChat {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let body = json!({"model": self.model, "messages": messages, "temperature": 0});
        let v = self.client.post("/chat/completions", &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Response("no choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone)]
pub struct HttpEmbedding {
    client: Client,
    model: String,
}

impl HttpEmbedding {
    pub fn new(cfg: &BackendConfig) -> Result<Self> {
        Ok(Self {
            client: Client::new(cfg)?,
            model: cfg.embedding_model.clone(),
        })
    }
}

/// Accepts `{"data":[{"embedding":[..]}]}`, `{"embedding":[..]}` or a bare
/// array.
fn extract_vector(v: &Value) -> Option<Vec<f64>> {
    let arr = v
        .pointer("/data/0/embedding")
        .or_else(|| v.get("embedding"))
        .unwrap_or(v)
        .as_array()?;
    arr.iter().map(Value::as_f64).collect()
}

impl EmbeddingBackend for HttpEmbedding {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let v = self
            .client
            .post("/embeddings", &json!({"model": self.model, "input": text}))?;
        match extract_vector(&v) {
            Some(vec) if !vec.is_empty() => Ok(vec),
            _ => Err(BackendError::Response("no embedding vector in response".into())),
        }
    }
}
