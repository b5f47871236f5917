//! Text embedders.
//!
//! [`HashedEmbedder`] is a deterministic signed-hash bag-of-tokens model used
//! for reproducible retrieval. [`RemoteEmbedder`] talks to an external model
//! server over HTTP.

use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const DEFAULT_DIMENSION: usize = 256;
pub const HASHED_EMBEDDER_ID: &str = "hashed-v1";

const FNV_OFFSET_BASIS: u64 = 14695981039346656037;
const FNV_PRIME: u64 = 1099511628211;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("remote embedder unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("embedder mismatch: {0}")]
    EmbedderMismatch(String),
}

/// Lowercases and splits on every non-alphanumeric code point.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// A unit-norm (or all-zero) embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn zeros(dimension: usize) -> Self {
        Self(vec![0.0; dimension])
    }

    /// L2-normalizes `values` in f64 and casts back; all-zero input stays zero.
    pub fn normalized(values: &[f64]) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Self::zeros(values.len());
        }
        Self(values.iter().map(|v| (v / norm) as f32).collect())
    }

    /// Wraps stored values without renormalizing (used when loading an index).
    pub(crate) fn from_stored(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|v| f64::from(*v) * f64::from(*v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Dot product accumulated in f64, index order.
pub(crate) fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| f64::from(*a) * f64::from(*b))
        .sum()
}

/// Cosine similarity of unit or zero vectors. A zero vector scores 0.0 against anything.
pub fn cosine(u: &Vector, v: &Vector) -> Result<f64, EmbeddingError> {
    if u.dimension() != v.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            left: u.dimension(),
            right: v.dimension(),
        });
    }
    Ok(dot(&u.0, &v.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbedderDescriptor {
    pub embedder_id: String,
    pub dimension: usize,
}

pub trait Embedder: Send + Sync {
    fn descriptor(&self) -> EmbedderDescriptor;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbeddingError>;

    fn embed(&self, text: &str) -> Result<Vector, EmbeddingError> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| EmbeddingError::EmbedderMismatch("empty batch result".into()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HashedEmbedder {
    dimension: usize,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

impl HashedEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }

    pub fn embed_text(&self, text: &str) -> Vector {
        let mut acc = vec![0.0f64; self.dimension];
        for token in tokenize(text) {
            let h = fnv1a64(token.as_bytes());
            let bucket = (h % self.dimension as u64) as usize;
            if (h >> 32) & 1 == 0 {
                acc[bucket] += 1.0;
            } else {
                acc[bucket] -= 1.0;
            }
        }
        Vector::normalized(&acc)
    }
}

impl Embedder for HashedEmbedder {
    fn descriptor(&self) -> EmbedderDescriptor {
        EmbedderDescriptor {
            embedder_id: HASHED_EMBEDDER_ID.to_string(),
            dimension: self.dimension,
        }
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }

    fn embed(&self, text: &str) -> Result<Vector, EmbeddingError> {
        Ok(self.embed_text(text))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// `POST {endpoint}/embed`; every returned vector is L2-normalized on receipt.
pub fn embed_remote(
    texts: &[&str],
    endpoint: &str,
    model_id: &str,
) -> Result<Vec<Vector>, EmbeddingError> {
    let url = format!("{}/embed", endpoint.trim_end_matches('/'));
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(30))
        .build();
    let resp: EmbedResponse = agent
        .post(&url)
        .send_json(EmbedRequest {
            model: model_id,
            texts,
        })
        .map_err(|e| EmbeddingError::RemoteUnavailable(e.to_string()))?
        .into_json()
        .map_err(|e| EmbeddingError::RemoteUnavailable(format!("bad response body: {e}")))?;
    if resp.vectors.len() != texts.len() {
        return Err(EmbeddingError::EmbedderMismatch(format!(
            "sent {} texts, got {} vectors",
            texts.len(),
            resp.vectors.len()
        )));
    }
    let dimension = resp.vectors.first().map(Vec::len).unwrap_or(0);
    resp.vectors
        .iter()
        .map(|v| {
            if v.len() != dimension || dimension == 0 {
                return Err(EmbeddingError::EmbedderMismatch(format!(
                    "vector of dimension {} in a batch of dimension {dimension}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EmbeddingError::EmbedderMismatch("non-finite component".into()));
            }
            Ok(Vector::normalized(v))
        })
        .collect()
}

/// Client for an external embedding server. The dimension is pinned by the
/// first response (or up front) and enforced on every later call.
#[derive(Debug)]
pub struct RemoteEmbedder {
    endpoint: String,
    model_id: String,
    dimension: OnceLock<usize>,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            dimension: OnceLock::new(),
        }
    }

    pub fn with_dimension(self, dimension: usize) -> Self {
        let _ = self.dimension.set(dimension);
        self
    }
}

impl Embedder for RemoteEmbedder {
    fn descriptor(&self) -> EmbedderDescriptor {
        EmbedderDescriptor {
            embedder_id: self.model_id.clone(),
            dimension: self.dimension.get().copied().unwrap_or(0),
        }
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbeddingError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let vectors = embed_remote(texts, &self.endpoint, &self.model_id)?;
        let got = vectors[0].dimension();
        let pinned = *self.dimension.get_or_init(|| got);
        if got != pinned {
            return Err(EmbeddingError::EmbedderMismatch(format!(
                "{} returned dimension {got}, expected {pinned}",
                self.model_id
            )));
        }
        Ok(vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Heart attack, symptoms!"), ["heart", "attack", "symptoms"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A-B a_b"), ["a", "b", "a", "b"]);
        assert_eq!(tokenize("ANSWER::yes"), ["answer", "yes"]);
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64-bit test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_text_embeds_to_zero() {
        let e = HashedEmbedder::default();
        let v = e.embed_text("");
        assert!(v.is_zero());
        assert_eq!(v.dimension(), 256);
        assert_eq!(cosine(&v, &e.embed_text("anything")).unwrap(), 0.0);
    }

    #[test]
    fn repetition_of_single_token_collapses() {
        let e = HashedEmbedder::default();
        assert_eq!(e.embed_text("x x"), e.embed_text("x"));
    }

    #[test]
    fn cosine_basics() {
        let mut a = vec![0.0; 4];
        a[0] = 1.0;
        let mut b = vec![0.0; 4];
        b[1] = 1.0;
        let (u, v) = (Vector::normalized(&a), Vector::normalized(&b));
        assert_eq!(cosine(&u, &u).unwrap(), 1.0);
        assert_eq!(cosine(&u, &v).unwrap(), 0.0);
        assert!(cosine(&u, &Vector::zeros(3)).is_err());
    }

    #[test]
    fn related_text_scores_higher() {
        let e = HashedEmbedder::default();
        let q = e.embed_text("heart attack");
        let near = cosine(&q, &e.embed_text("attack of the heart")).unwrap();
        let far = cosine(&q, &e.embed_text("stock market index")).unwrap();
        assert!(near > far, "{near} <= {far}");
    }
}
