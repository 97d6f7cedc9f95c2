//! Chat-completions client over blocking HTTP.

use serde_json::{json, Value};

use super::{Backend, BackendConfig, Completion, PromptKind};
use crate::error::{Error, Result};

const EXCERPT_LEN: usize = 200;

pub struct HttpBackend {
    config: BackendConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Done(String),
    Retryable(String),
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(Self { config, agent })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.config.model_name,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": self.config.sampling_temperature,
        })
    }

    fn attempt(&self, body: &Value) -> Result<Attempt> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = self.config.api_key.expose() {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retryable(self.redact(&e.to_string()))),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Ok(Attempt::Retryable(self.redact(&e.to_string()))),
        };
        if status >= 400 {
            let excerpt: String = text.chars().take(EXCERPT_LEN).collect();
            return Err(Error::Service {
                status,
                excerpt: self.redact(&excerpt),
            });
        }
        match extract_content(&text) {
            Some(content) => Ok(Attempt::Done(content)),
            None => Ok(Attempt::Retryable("malformed completion body".into())),
        }
    }

    fn redact(&self, s: &str) -> String {
        match self.config.api_key.expose() {
            Some(key) if !key.is_empty() => s.replace(key, "***"),
            _ => s.to_string(),
        }
    }
}

/// `choices[0].message.content` of a chat-completion response body.
pub fn extract_content(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    v.get("choices")?
        .get(0)?
        .get("message")?
        .get("content")?
        .as_str()
        .map(str::to_owned)
}

impl Backend for HttpBackend {
    fn complete(&self, kind: PromptKind, prompt: &str) -> Result<Completion> {
        let body = self.request_body(prompt);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.attempt(&body)? {
                Attempt::Done(text) => {
                    return Ok(Completion {
                        text,
                        retries: attempt,
                    })
                }
                Attempt::Retryable(msg) => {
                    log::warn!("{kind} call attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }
}
