//! Text embedding providers.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::provider::{ProviderError, RetryPolicy};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("embedder returned {got} vectors for {expected} inputs")]
    Count { expected: usize, got: usize },
    #[error("embedder returned a zero-length vector")]
    ZeroDimension,
}

/// Turns texts into fixed-dimension vectors. Implementations must accept
/// concurrent calls.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbeddingError>;

    /// Output dimension, when known without a call.
    fn dimension(&self) -> Option<usize> {
        None
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for &T {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        (**self).embed(texts)
    }
    fn dimension(&self) -> Option<usize> {
        (**self).dimension()
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        (**self).embed(texts)
    }
    fn dimension(&self) -> Option<usize> {
        (**self).dimension()
    }
}

/// Embeds one text, checking the provider returned exactly one vector.
pub fn embed_one(provider: &dyn EmbeddingProvider, text: &str) -> Result<Vec<f32>, EmbeddingError> {
    let mut out = provider.embed(&[text.to_string()])?;
    if out.len() != 1 {
        return Err(EmbeddingError::Count { expected: 1, got: out.len() });
    }
    Ok(out.remove(0))
}

/// Deterministic offline embedder: signed feature hashing of lowercase
/// word tokens into `dim` buckets. Useful for tests and replay runs where
/// no model server is available.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self { dim }
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0f32; self.dim];
                for tok in crate::fewshot::tokenize(t) {
                    let h = Sha256::digest(tok.as_bytes());
                    let bucket = u64::from_le_bytes(h[..8].try_into().unwrap()) as usize % self.dim;
                    let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
                    v[bucket] += sign;
                }
                v
            })
            .collect())
    }

    fn dimension(&self) -> Option<usize> {
        Some(self.dim)
    }
}

/// Client for an OpenAI-compatible `/embeddings` endpoint (TEI, Ollama,
/// vLLM and the hosted APIs all speak it).
pub struct HttpEmbedder {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f32>,
}

impl HttpEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        retry: RetryPolicy,
    ) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| ProviderError::fatal("embedding", e.to_string()))?;
        Ok(Self {
            client,
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            retry,
        })
    }

    fn call(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let mut req = self.client.post(&self.endpoint).json(&EmbeddingRequest {
            model: &self.model,
            input: texts,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ProviderError::from_reqwest("embedding", &e))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| ProviderError::from_reqwest("embedding", &e))?;
        if !status.is_success() {
            return Err(ProviderError::from_status("embedding", status.as_u16(), &body));
        }
        let mut parsed: EmbeddingResponse = serde_json::from_str(&body)
            .map_err(|e| ProviderError::fatal("embedding", format!("bad response: {e}")))?;
        if parsed.data.iter().all(|d| d.index.is_some()) {
            parsed.data.sort_by_key(|d| d.index);
        }
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.retry.run(|| self.call(texts))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashing_embedder_is_deterministic() {
        let e = HashingEmbedder::new(16);
        let a = e.embed(&["Hello world".into(), "hello WORLD".into()]).unwrap();
        assert_eq!(a[0], a[1]);
        assert_eq!(a[0].len(), 16);
        assert!(a[0].iter().map(|x| x.abs()).sum::<f32>() <= 2.0);
    }

    #[test]
    fn empty_text_gives_zero_vector() {
        let e = HashingEmbedder::new(4);
        assert_eq!(embed_one(&e, "").unwrap(), vec![0.0; 4]);
    }
}
