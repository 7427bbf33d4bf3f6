//! Text embedding providers and the cosine primitive.

use std::hash::Hasher;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

pub const DEFAULT_HASH_DIM: usize = 256;
pub const DEFAULT_HASH_SEED: u64 = 0x1a2b_3c4d_5e6f_7081;
const REMOTE_MAX_BATCH: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("text has no embeddable tokens")]
    NoTokens,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("remote embedding request failed (retryable): {0}")]
    Transport(String),
    #[error("remote embedding response invalid: {0}")]
    BadResponse(String),
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Transport(_))
    }
}

/// Unit-norm dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    /// Wraps raw values, L2-normalizing them.
    pub fn normalized(mut values: Vec<f32>) -> Result<Self, EmbedError> {
        let norm = norm(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbedError::ZeroVector);
        }
        for v in &mut values {
            *v = (*v as f64 / norm) as f32;
        }
        Ok(Self { values })
    }

    /// Wraps raw values as-is. Used for test vectors and loaded index data.
    pub fn from_raw(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// Dot product accumulated in f64. Every similarity score in the crate goes
/// through this function so that scores are bitwise reproducible.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] as f64 * b[j] as f64;
        acc[1] += a[j + 1] as f64 * b[j + 1] as f64;
        acc[2] += a[j + 2] as f64 * b[j + 2] as f64;
        acc[3] += a[j + 3] as f64 * b[j + 3] as f64;
    }
    let mut tail = 0f64;
    for j in chunks * 4..a.len() {
        tail += a[j] as f64 * b[j] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine from a dot product and the two norms, clamped to [-1, 1].
#[inline]
pub fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    cosine_slices(a.values(), b.values())
}

pub fn cosine_slices(a: &[f32], b: &[f32]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimMismatch(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok(cosine_from_parts(dot(a, b), na, nb))
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError>;

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut out = self.embed_batch(&[text])?;
        out.pop().ok_or_else(|| EmbedError::BadResponse("empty batch".into()))
    }
}

/// Tokens for the hash embedder: split on non-alphanumerics, lowercased.
pub fn hash_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

/// Signed feature hashing of a bag of tokens, then L2 normalization.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_HASH_DIM, DEFAULT_HASH_SEED)
    }
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self { dim, seed }
    }

    fn token_hash(&self, token: &str) -> u64 {
        let mut h = FnvHasher::with_key(self.seed);
        h.write(token.as_bytes());
        mix64(h.finish())
    }

    /// Bucket index and sign for a token.
    pub fn slot(&self, token: &str) -> (usize, f32) {
        let h = self.token_hash(token);
        let bucket = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }

    fn embed_one(&self, text: &str) -> Result<Embedding, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut values = vec![0f32; self.dim];
        let mut any = false;
        for tok in hash_tokens(text) {
            let (bucket, sign) = self.slot(&tok);
            values[bucket] += sign;
            any = true;
        }
        if !any {
            return Err(EmbedError::NoTokens);
        }
        Embedding::normalized(values)
    }
}

// splitmix64 finalizer; FNV alone leaves the low bits poorly mixed.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

/// Counting semaphore bounding in-flight remote requests.
#[derive(Debug)]
pub(crate) struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub(crate) fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits.max(1)), cv: Condvar::new() }
    }

    pub(crate) fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub(crate) struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.cv.notify_one();
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// Client for a JSON embedding service: `{"texts":[..]}` -> `{"vectors":[[..]]}`.
pub struct RemoteEmbedder {
    url: String,
    token: Option<String>,
    dim: usize,
    batch_size: usize,
    agent: ureq::Agent,
    in_flight: Semaphore,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, dim: usize, token: Option<String>, max_in_flight: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.into(),
            token,
            dim,
            batch_size: REMOTE_MAX_BATCH,
            agent,
            in_flight: Semaphore::new(max_in_flight),
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.clamp(1, REMOTE_MAX_BATCH);
        self
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        let _permit = self.in_flight.acquire();
        let mut req = self.agent.post(&self.url);
        if let Some(tok) = &self.token {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let mut resp = req.send_json(EmbedRequest { texts }).map_err(|e| EmbedError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(EmbedError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(EmbedError::BadResponse(format!("HTTP {status}")));
        }
        let body: EmbedResponse = resp.body_mut().read_json().map_err(|e| EmbedError::BadResponse(e.to_string()))?;
        if body.vectors.len() != texts.len() {
            return Err(EmbedError::BadResponse(format!(
                "expected {} vectors, got {}",
                texts.len(),
                body.vectors.len()
            )));
        }
        body.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(EmbedError::DimMismatch(v.len(), self.dim));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(EmbedError::BadResponse("non-finite component".into()));
                }
                Embedding::normalized(v)
            })
            .collect()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            out.extend(self.request(chunk)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProviderConfig {
    HashLocal {
        #[serde(default = "default_hash_dim")]
        dim: usize,
        #[serde(default = "default_hash_seed")]
        seed: u64,
    },
    HttpRemote {
        url: String,
        dim: usize,
        /// Environment variable holding the bearer token.
        #[serde(default = "default_token_env")]
        token_env: String,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
        #[serde(default = "default_batch")]
        batch_size: usize,
    },
}

fn default_hash_dim() -> usize {
    DEFAULT_HASH_DIM
}
fn default_hash_seed() -> u64 {
    DEFAULT_HASH_SEED
}
fn default_token_env() -> String {
    "IMLOOP_EMBED_API_KEY".into()
}
fn default_in_flight() -> usize {
    4
}
fn default_batch() -> usize {
    REMOTE_MAX_BATCH
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::HashLocal { dim: DEFAULT_HASH_DIM, seed: DEFAULT_HASH_SEED }
    }
}

impl ProviderConfig {
    pub fn build(&self) -> Arc<dyn EmbeddingProvider> {
        match self {
            ProviderConfig::HashLocal { dim, seed } => Arc::new(HashEmbedder::new(*dim, *seed)),
            ProviderConfig::HttpRemote { url, dim, token_env, max_in_flight, batch_size } => Arc::new(
                RemoteEmbedder::new(url.clone(), *dim, std::env::var(token_env).ok(), *max_in_flight)
                    .with_batch_size(*batch_size),
            ),
        }
    }
}
