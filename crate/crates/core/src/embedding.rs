//! Text-embedding providers behind the text similarity index.
//!
//! [`HashEmbedder`] is the offline default: a signed feature-hashing
//! bag-of-tokens. [`RemoteEmbedder`] talks to an external embedding service.

use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DIMENSION: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn zeros(dimension: usize) -> Self {
        Self(vec![0.0; dimension])
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Provider contract: deterministic for a fixed provider and input, with a
/// fixed output dimension.
pub trait Embedder: Send + Sync {
    fn provider_id(&self) -> String;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut out = self.embed_batch(&[text.to_string()])?;
        out.pop()
            .ok_or_else(|| Error::EmbeddingProvider("provider returned no vector".into()))
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dimension: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dimension: DEFAULT_DIMENSION,
        }
    }
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }
}

/// Each token is hashed with 64-bit FNV-1a. The bucket is `h mod dim`; the
/// sign comes from the next bit above the bucket, `(h / dim) & 1`
/// (0 → +1, 1 → −1). Empty input yields the zero vector.
pub fn fallback_embed(text: &str, dimension: usize) -> EmbeddingVector {
    let mut v = vec![0.0; dimension];
    let dim = dimension as u64;
    for token in tokenize(text) {
        let h = fnv1a(token.as_bytes());
        let bucket = (h % dim) as usize;
        let sign = if (h / dim) & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    EmbeddingVector(v)
}

impl Embedder for HashEmbedder {
    fn provider_id(&self) -> String {
        format!("hash-fnv1a-{}", self.dimension)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts
            .iter()
            .map(|t| fallback_embed(t, self.dimension))
            .collect())
    }
}

/// `dot(a, b) / (‖a‖‖b‖)`, defined as 0 when either norm is 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
    dimension: usize,
}

/// Client for an external embedding service.
///
/// Sends `{"texts": [...]}` and expects `{"vectors": [[...]...], "dimension": n}`.
/// The dimension observed on the first successful call is pinned; any later
/// change is reported as a provider failure.
#[derive(Debug)]
pub struct RemoteEmbedder {
    url: String,
    agent: ureq::Agent,
    dimension: Mutex<Option<usize>>,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            agent,
            dimension: Mutex::new(None),
        }
    }

    pub fn dimension(&self) -> Option<usize> {
        *self.dimension.lock().unwrap()
    }
}

impl Embedder for RemoteEmbedder {
    fn provider_id(&self) -> String {
        format!("remote:{}", self.url)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let fail = |msg: String| Error::EmbeddingProvider(msg);
        let resp: EmbedResponse = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { texts })
            .map_err(|e| fail(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| fail(format!("malformed response: {e}")))?;

        if resp.vectors.len() != texts.len() {
            return Err(fail(format!(
                "expected {} vectors, got {}",
                texts.len(),
                resp.vectors.len()
            )));
        }
        if let Some(v) = resp.vectors.iter().find(|v| v.len() != resp.dimension) {
            return Err(fail(format!(
                "vector of length {} under declared dimension {}",
                v.len(),
                resp.dimension
            )));
        }
        if resp.vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(fail("non-finite vector entry".into()));
        }
        let mut pinned = self.dimension.lock().unwrap();
        match *pinned {
            Some(d) if d != resp.dimension => {
                return Err(fail(format!(
                    "dimension drift: {d} then {}",
                    resp.dimension
                )))
            }
            _ => *pinned = Some(resp.dimension),
        }
        Ok(resp.vectors.into_iter().map(EmbeddingVector).collect())
    }
}
