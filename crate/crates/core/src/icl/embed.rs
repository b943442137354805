//! Document embedding providers.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::IclError;
use crate::text::tokens;

/// Turns texts into fixed-length vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, IclError>;
}

/// Deterministic bag-of-tokens embedder: each token is hashed (FNV-1a) into
/// one of `dim` signed buckets and the result is L2-normalized. Documents
/// sharing vocabulary land close together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: 256 }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim.max(1)];
        for token in tokens(text) {
            let h = fnv1a(&token);
            let bucket = (h % v.len() as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, IclError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    /// Base URL; `/embeddings` is appended.
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    32
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
pub struct HttpEmbedder {
    url: String,
    model: String,
    api_key: Option<String>,
    batch_size: usize,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(config: &HttpEmbedderConfig) -> Result<Self, IclError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| IclError::Provider(e.to_string()))?;
        Ok(HttpEmbedder {
            url: format!("{}/embeddings", config.endpoint.trim_end_matches('/')),
            model: config.model.clone(),
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
            batch_size: config.batch_size.max(1),
            client,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, IclError> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.batch_size) {
            let mut req = self.client.post(&self.url).json(&json!({ "model": self.model, "input": batch }));
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req.send().map_err(|e| IclError::Provider(e.to_string()))?;
            let status = resp.status();
            if !status.is_success() {
                let body = resp.text().unwrap_or_default();
                return Err(IclError::Provider(format!("http status {}: {body}", status.as_u16())));
            }
            let mut parsed: EmbeddingResponse = resp.json().map_err(|e| IclError::Provider(e.to_string()))?;
            if parsed.data.len() != batch.len() {
                return Err(IclError::Provider(format!(
                    "asked for {} embeddings, got {}",
                    batch.len(),
                    parsed.data.len()
                )));
            }
            parsed.data.sort_by_key(|d| d.index.unwrap_or(0));
            out.extend(parsed.data.into_iter().map(|d| d.embedding));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_embedder_is_deterministic_and_normalized() {
        let e = HashEmbedder::default();
        let a = e.embed_one("the old monk was filled with worry");
        assert_eq!(a, e.embed_one("the old monk was filled with worry"));
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(e.embed_one("").iter().all(|x| *x == 0.0));
    }
}
