//! Text-to-vector encoders for the search text.

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gateway::Secret;
use crate::store::normalize;

pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

impl<E: TextEmbedder + ?Sized> TextEmbedder for &E {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed(text)
    }
}

impl<E: TextEmbedder + ?Sized> TextEmbedder for Box<E> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed(text)
    }
}

/// Offline bag-of-words encoder: each lowercase token maps to a fixed
/// Gaussian direction seeded from its SHA-256, and the text embedding is the
/// normalized sum. Shares no space with any image encoder; it exists so the
/// loop can run end to end without a model.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl TextEmbedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        let mut tokens = 0;
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let v = self.token_vector(&token.to_lowercase());
            acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            tokens += 1;
        }
        if tokens == 0 {
            return Err(Error::validation("cannot embed text without tokens"));
        }
        normalize(&acc)
    }
}

/// Client for an embeddings endpoint taking `{"model", "input"}` and
/// answering `{"data": [{"embedding": [...]}]}`.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    api_key: Secret,
    dim: usize,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, model: &str, api_key: Secret, dim: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key,
            dim,
            agent,
        }
    }
}

impl TextEmbedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = self.api_key.expose() {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let transport = |e: ureq::Error| Error::Transport {
            attempts: 1,
            message: e.to_string(),
        };
        let mut resp = req
            .send_json(json!({ "model": self.model, "input": text }))
            .map_err(transport)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(transport)?;
        if status >= 400 {
            return Err(Error::Service {
                status,
                excerpt: body.chars().take(200).collect(),
            });
        }
        let v: Value = serde_json::from_str(&body)
            .map_err(|e| Error::Parse(format!("embedding body: {e}")))?;
        let values = v
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Parse("embedding body lacks data[0].embedding".into()))?;
        let vector: Vec<f64> = values
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| Error::Parse("non-numeric embedding".into())))
            .collect::<Result<_>>()?;
        if vector.len() != self.dim {
            return Err(Error::validation(format!(
                "embedding has dimension {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        normalize(&vector)
    }
}
