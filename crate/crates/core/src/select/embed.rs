//! Sentence embeddings with a content-hash cache.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SelectError;
use crate::llm::RetryPolicy;

/// Something that turns texts into fixed-width vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn model(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("transient embedding failure: {0}")]
    Transient(String),
    #[error("embedding request rejected: {0}")]
    Fatal(String),
}

/// Offline embedder: signed feature hashing of lower-cased word unigrams and
/// bigrams, L2-normalised. Deterministic and dependency-free, but far weaker
/// than a sentence-transformer; use it for dry runs and tests.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }

    fn bucket(&self, feature: &str) -> (usize, f64) {
        let digest = Sha256::digest(feature.as_bytes());
        let n = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        ((n % self.dim as u64) as usize, sign)
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric() && c != '<' && c != '>')
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
            .collect();
        let mut v = vec![0.0; self.dim];
        for w in &words {
            let (i, s) = self.bucket(w);
            v[i] += s;
        }
        for pair in words.windows(2) {
            let (i, s) = self.bucket(&format!("{} {}", pair[0], pair[1]));
            v[i] += 0.5 * s;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // keep every vector nonzero so cosine stays defined
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn model(&self) -> &str {
        "hashing"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// OpenAI-compatible `/embeddings` endpoint (works with text-embeddings-inference
/// and similar servers hosting all-mpnet-base-v2).
#[derive(Debug, Clone)]
pub struct HttpEmbeddingProvider {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub dim: usize,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct EmbeddingData {
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingData>,
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn model(&self) -> &str {
        &self.model
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let mut req = ureq::post(&url).timeout(self.timeout);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::json!({ "model": self.model, "input": texts });
        match req.send_json(body) {
            Ok(resp) => {
                let reply: EmbeddingReply = resp
                    .into_json()
                    .map_err(|e| ProviderError::Fatal(format!("bad embedding reply: {e}")))?;
                Ok(reply.data.into_iter().map(|d| d.embedding).collect())
            }
            Err(ureq::Error::Status(code, resp)) => {
                let msg = format!("HTTP {code}: {}", resp.into_string().unwrap_or_default());
                if code == 429 || code >= 500 {
                    Err(ProviderError::Transient(msg))
                } else {
                    Err(ProviderError::Fatal(msg))
                }
            }
            Err(e) => Err(ProviderError::Transient(e.to_string())),
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CacheFile {
    model: String,
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

/// Caching front for an [`EmbeddingProvider`].
///
/// Vectors are keyed by the SHA-256 of the text and optionally persisted to a
/// JSON file. Only cache misses reach the provider.
pub struct Embedder {
    provider: Box<dyn EmbeddingProvider>,
    cache: Mutex<HashMap<String, Vec<f64>>>,
    cache_path: Option<PathBuf>,
    retry: RetryPolicy,
    batch_size: usize,
    provider_requests: AtomicUsize,
}

pub fn text_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Embedder {
    pub fn new(provider: Box<dyn EmbeddingProvider>) -> Self {
        Self {
            provider,
            cache: Mutex::new(HashMap::new()),
            cache_path: None,
            retry: RetryPolicy::default(),
            batch_size: 64,
            provider_requests: AtomicUsize::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Loads (if present) and later persists the cache at `path`. A cache
    /// written by a different model or dimension is ignored.
    pub fn with_cache_file(mut self, path: &Path) -> Result<Self, SelectError> {
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| SelectError::Cache(e.to_string()))?;
            let file: CacheFile = serde_json::from_str(&text).map_err(|e| SelectError::Cache(e.to_string()))?;
            if file.model == self.provider.model() && file.dim == self.provider.dim() {
                *self.cache.lock().expect("cache lock") = file.vectors;
            } else {
                log::warn!("ignoring embedding cache {} built for another model", path.display());
            }
        }
        self.cache_path = Some(path.to_path_buf());
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.provider.dim()
    }

    pub fn provider_requests(&self) -> usize {
        self.provider_requests.load(Ordering::SeqCst)
    }

    fn call_provider(&self, batch: &[String]) -> Result<Vec<Vec<f64>>, SelectError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.provider_requests.fetch_add(1, Ordering::SeqCst);
            match self.provider.embed_batch(batch) {
                Ok(v) => return Ok(v),
                Err(ProviderError::Transient(msg)) if attempt < self.retry.max_attempts => {
                    log::warn!("embedding attempt {attempt} failed: {msg}");
                    std::thread::sleep(self.retry.delay_for(attempt));
                }
                Err(e) => return Err(SelectError::Provider(e.to_string())),
            }
        }
    }

    /// One vector per input, in input order.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, SelectError> {
        let keys: Vec<String> = texts.iter().map(|t| text_key(t)).collect();
        let mut missing: Vec<(String, String)> = Vec::new();
        {
            let cache = self.cache.lock().expect("cache lock");
            for (k, t) in keys.iter().zip(texts) {
                if !cache.contains_key(k) && !missing.iter().any(|(mk, _)| mk == k) {
                    missing.push((k.clone(), t.clone()));
                }
            }
        }
        let dim = self.provider.dim();
        for chunk in missing.chunks(self.batch_size.max(1)) {
            let batch: Vec<String> = chunk.iter().map(|(_, t)| t.clone()).collect();
            let vectors = self.call_provider(&batch)?;
            if vectors.len() != batch.len() {
                return Err(SelectError::Provider(format!(
                    "provider returned {} vectors for {} texts",
                    vectors.len(),
                    batch.len()
                )));
            }
            let mut cache = self.cache.lock().expect("cache lock");
            for ((k, _), v) in chunk.iter().zip(vectors) {
                if v.len() != dim {
                    return Err(SelectError::DimensionMismatch { expected: dim, got: v.len() });
                }
                cache.insert(k.clone(), v);
            }
        }
        if !missing.is_empty() {
            self.persist()?;
        }
        let cache = self.cache.lock().expect("cache lock");
        Ok(keys.iter().map(|k| cache[k].clone()).collect())
    }

    pub fn embed_one(&self, text: &str) -> Result<Vec<f64>, SelectError> {
        Ok(self.embed(&[text.to_string()])?.remove(0))
    }

    fn persist(&self) -> Result<(), SelectError> {
        let Some(path) = &self.cache_path else {
            return Ok(());
        };
        let file = CacheFile {
            model: self.provider.model().to_string(),
            dim: self.provider.dim(),
            vectors: self.cache.lock().expect("cache lock").clone(),
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| SelectError::Cache(e.to_string()))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(&file).expect("cache serializes"))
            .and_then(|_| fs::rename(&tmp, path))
            .map_err(|e| SelectError::Cache(e.to_string()))
    }
}
