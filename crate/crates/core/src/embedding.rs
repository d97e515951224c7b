//! Text embedders behind one contract: a deterministic feature-hashing
//! embedder and a client for a remote embedding endpoint.
//!
//! Every non-null vector leaving an embedder is unit-norm, so cosine
//! similarity is a plain dot product downstream.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::limit::InFlightLimiter;

pub const DEFAULT_DIM: usize = 384;
const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("null vectors are not allowed here")]
    NullVector,
    #[error("embedding dimension must be at least {min} (got {got})")]
    InvalidDimension { min: usize, got: usize },
    #[error("non-finite value in embedding")]
    NonFinite,
    #[error("embedding endpoint {endpoint} failed: {message}")]
    Remote { endpoint: String, message: String, retriable: bool },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

impl EmbedError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, EmbedError::Remote { retriable: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    is_null: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::InvalidDimension { min: 1, got: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(EmbeddingVector { values, is_null: false })
    }

    /// Placeholder for a structurally expected but absent modality.
    pub fn null(dim: usize) -> Self {
        EmbeddingVector { values: vec![0.0; dim], is_null: true }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_null(&self) -> bool {
        self.is_null
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_unit(&self) -> bool {
        !self.is_null && (self.norm() - 1.0).abs() <= NORM_TOLERANCE
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.values, &other.values)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `v` to unit length. Zero and null vectors are rejected.
pub fn l2_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector, EmbedError> {
    if v.is_null {
        return Err(EmbedError::NullVector);
    }
    let norm = v.norm();
    if norm == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok(EmbeddingVector { values: v.values.iter().map(|x| x / norm).collect(), is_null: false })
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    // murmur3 finalizer so low bits (bucket) and the top bit (sign) are well mixed
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

/// Lowercased alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Bucket and sign of one hashed feature. Exposed so tests can hand-compute vectors.
pub fn feature_slot(feature: &str, dim: usize) -> (usize, f64) {
    let h = fnv1a(&[feature.as_bytes()]);
    let bucket = (h % dim as u64) as usize;
    let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
    (bucket, sign)
}

/// Signed feature hashing over word 1-grams and 2-grams, then l2 normalization.
///
/// Features are the lowercased tokens and each adjacent token pair joined by a
/// single space. Each adds ±1 to bucket `hash % dim` with the sign taken from
/// the hash's top bit; the hash is FNV-1a with a murmur3 finalizer, so output
/// is identical across runs and platforms. Two distinct features share a
/// bucket with probability 1/dim. If no features exist or their contributions
/// cancel exactly, the whole text is hashed as one extra feature.
pub fn hash_embed(text: &str, dim: usize) -> Result<EmbeddingVector, EmbedError> {
    if dim < 2 {
        return Err(EmbedError::InvalidDimension { min: 2, got: dim });
    }
    let tokens = tokenize(text);
    let mut values = vec![0.0; dim];
    let mut add = |feature: &str| {
        let (bucket, sign) = feature_slot(feature, dim);
        values[bucket] += sign;
    };
    for t in &tokens {
        add(t);
    }
    for pair in tokens.windows(2) {
        add(&format!("{} {}", pair[0], pair[1]));
    }
    if values.iter().all(|v| *v == 0.0) {
        let (bucket, sign) = feature_slot(&format!("\u{0}doc:{text}"), dim);
        values[bucket] += sign;
    }
    l2_normalize(&EmbeddingVector { values, is_null: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedRole {
    Query,
    Document,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEndpoint {
    pub url: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_embed_model")]
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_embed_model() -> String {
    "default".into()
}

fn default_timeout_secs() -> u64 {
    30
}

fn default_max_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingProvider {
    HashLocal,
    Remote(RemoteEndpoint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub provider: EmbeddingProvider,
    pub role: EmbedRole,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig { dim: DEFAULT_DIM, provider: EmbeddingProvider::HashLocal, role: EmbedRole::Document }
    }
}

impl EmbedderConfig {
    pub fn hash_local(dim: usize, role: EmbedRole) -> Self {
        EmbedderConfig { dim, provider: EmbeddingProvider::HashLocal, role }
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>, EmbedError> {
        match &self.provider {
            EmbeddingProvider::HashLocal => Ok(Box::new(HashEmbedder::new(self.dim)?)),
            EmbeddingProvider::Remote(endpoint) => Ok(Box::new(RemoteEmbedder::new(endpoint.clone(), self.dim)?)),
        }
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn name(&self) -> String;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut out = self.embed_batch(&[text])?;
        out.pop().ok_or(EmbedError::DimensionMismatch { expected: 1, got: 0 })
    }
}

/// Embeds one text with the embedder described by `config`.
pub fn embed_text(text: &str, config: &EmbedderConfig) -> Result<EmbeddingVector, EmbedError> {
    config.build()?.embed(text)
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        if dim < 2 {
            return Err(EmbedError::InvalidDimension { min: 2, got: dim });
        }
        Ok(HashEmbedder { dim })
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> String {
        format!("hash-local-{}", self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts
            .iter()
            .map(|t| if t.trim().is_empty() { Err(EmbedError::EmptyText) } else { hash_embed(t, self.dim) })
            .collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    inputs: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for `POST {url}` with body `{model, inputs}` answering `{vectors}`.
pub struct RemoteEmbedder {
    endpoint: RemoteEndpoint,
    dim: usize,
    client: reqwest::blocking::Client,
    limiter: InFlightLimiter,
}

impl RemoteEmbedder {
    pub fn new(endpoint: RemoteEndpoint, dim: usize) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build()
            .map_err(|e| EmbedError::Remote { endpoint: endpoint.url.clone(), message: e.to_string(), retriable: false })?;
        let limiter = InFlightLimiter::new(endpoint.max_in_flight);
        Ok(RemoteEmbedder { endpoint, dim, client, limiter })
    }

    fn remote_err(&self, message: impl Into<String>, retriable: bool) -> EmbedError {
        EmbedError::Remote { endpoint: self.endpoint.url.clone(), message: message.into(), retriable }
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> String {
        format!("remote:{}", self.endpoint.model)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let _permit = self.limiter.acquire();
        let mut req = self
            .client
            .post(&self.endpoint.url)
            .json(&EmbedRequest { model: &self.endpoint.model, inputs: texts });
        if let Some(key) = &self.endpoint.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| self.remote_err(e.to_string(), true))?;
        let status = resp.status();
        if !status.is_success() {
            let retriable = status.is_server_error() || status.as_u16() == 429;
            return Err(self.remote_err(format!("HTTP {status}"), retriable));
        }
        let body: EmbedResponse = resp.json().map_err(|e| self.remote_err(format!("bad response body: {e}"), false))?;
        if body.vectors.len() != texts.len() {
            return Err(EmbedError::DimensionMismatch { expected: texts.len(), got: body.vectors.len() });
        }
        body.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(EmbedError::DimensionMismatch { expected: self.dim, got: v.len() });
                }
                l2_normalize(&EmbeddingVector::new(v)?)
            })
            .collect()
    }
}
