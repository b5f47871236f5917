//! A provider's vectorized corpus: ingestion, exact top-k retrieval and the
//! on-disk index format.
//!
//! Index file layout (all integers little-endian):
//!
//! ```text
//! "CFR1" | dimension u32 | count u32 | embedder_id (u16 len + UTF-8)
//! per entry: id, product, provider_id, text (each u32 len + UTF-8)
//!            digest (32 raw bytes) | vector (dimension x f32)
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, Embedder, EmbedderDescriptor, Vector};
use crate::par::{self, ExecMode};
use crate::protocol::{rank_order, Chunk, ChunkError, ScoreKind, ScoredChunk};

const MAGIC: &[u8; 4] = b"CFR1";
const EMBED_BATCH: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum VectorStoreError {
    #[error("duplicate chunk id {0}")]
    DuplicateChunk(String),
    #[error("chunk {id} belongs to product {found}, index holds {expected}")]
    WrongProduct {
        id: String,
        found: String,
        expected: String,
    },
    #[error("invalid chunk: {0}")]
    InvalidChunk(#[from] ChunkError),
    #[error("embedder mismatch: {0}")]
    EmbedderMismatch(String),
    #[error("query dimension {query} does not match index dimension {index}")]
    DimensionMismatch { query: usize, index: usize },
    #[error("incompatible index: {0}")]
    IncompatibleIndex(String),
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Public description of a data product. Never carries chunk text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataProduct {
    pub name: String,
    pub count: usize,
    pub embedder_id: String,
    pub dimension: usize,
}

/// Chunks and their embeddings, stored as one flat row-major `f32` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    descriptor: EmbedderDescriptor,
    product: String,
    chunks: Vec<Chunk>,
    vectors: Vec<f32>,
}

impl VectorIndex {
    pub fn empty(product: impl Into<String>, descriptor: EmbedderDescriptor) -> Self {
        Self {
            descriptor,
            product: product.into(),
            chunks: Vec::new(),
            vectors: Vec::new(),
        }
    }

    /// Embeds every chunk and builds an index in insertion order.
    pub fn ingest(
        product: &str,
        chunks: Vec<Chunk>,
        embedder: &dyn Embedder,
    ) -> Result<Self, VectorStoreError> {
        Self::ingest_with(product, chunks, embedder, ExecMode::preferred())
    }

    pub fn ingest_with(
        product: &str,
        chunks: Vec<Chunk>,
        embedder: &dyn Embedder,
        mode: ExecMode,
    ) -> Result<Self, VectorStoreError> {
        let mut seen = HashSet::with_capacity(chunks.len());
        for chunk in &chunks {
            chunk.validate()?;
            if chunk.product != product {
                return Err(VectorStoreError::WrongProduct {
                    id: chunk.id.clone(),
                    found: chunk.product.clone(),
                    expected: product.to_string(),
                });
            }
            if !seen.insert(chunk.id.as_str()) {
                return Err(VectorStoreError::DuplicateChunk(chunk.id.clone()));
            }
        }

        let batches: Vec<&[Chunk]> = chunks.chunks(EMBED_BATCH).collect();
        let embedded = par::try_map(mode, &batches, |batch| {
            let texts: Vec<&str> = batch.iter().map(|c| c.text.as_str()).collect();
            embedder.embed_batch(&texts)
        })
        .map_err(|e| VectorStoreError::EmbedderMismatch(e.to_string()))?;

        let descriptor = embedder.descriptor();
        let mut vectors = Vec::with_capacity(chunks.len() * descriptor.dimension);
        for v in embedded.into_iter().flatten() {
            if v.dimension() != descriptor.dimension {
                return Err(VectorStoreError::EmbedderMismatch(format!(
                    "{} produced dimension {}, descriptor says {}",
                    descriptor.embedder_id,
                    v.dimension(),
                    descriptor.dimension
                )));
            }
            vectors.extend_from_slice(v.as_slice());
        }
        if vectors.len() != chunks.len() * descriptor.dimension {
            return Err(VectorStoreError::EmbedderMismatch(
                "embedder returned the wrong number of vectors".into(),
            ));
        }
        Ok(Self {
            descriptor,
            product: product.to_string(),
            chunks,
            vectors,
        })
    }

    pub fn descriptor(&self) -> &EmbedderDescriptor {
        &self.descriptor
    }

    pub fn product(&self) -> &str {
        &self.product
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn vector(&self, i: usize) -> Vector {
        let d = self.descriptor.dimension;
        Vector::from_stored(self.vectors[i * d..(i + 1) * d].to_vec())
    }

    /// Renames the product (used when an operator mounts an index under a name).
    pub fn set_product(&mut self, product: &str) -> Result<(), VectorStoreError> {
        if let Some(c) = self.chunks.iter().find(|c| c.product != product) {
            return Err(VectorStoreError::WrongProduct {
                id: c.id.clone(),
                found: c.product.clone(),
                expected: product.to_string(),
            });
        }
        self.product = product.to_string();
        Ok(())
    }

    pub fn stats(&self) -> DataProduct {
        DataProduct {
            name: self.product.clone(),
            count: self.chunks.len(),
            embedder_id: self.descriptor.embedder_id.clone(),
            dimension: self.descriptor.dimension,
        }
    }

    /// Exact top-k by cosine, ordered by (score desc, id asc).
    pub fn top_k(&self, query: &Vector, k: usize) -> Result<Vec<ScoredChunk>, VectorStoreError> {
        self.top_k_with(query, k, ExecMode::preferred())
    }

    pub fn top_k_with(
        &self,
        query: &Vector,
        k: usize,
        mode: ExecMode,
    ) -> Result<Vec<ScoredChunk>, VectorStoreError> {
        let d = self.descriptor.dimension;
        if query.dimension() != d {
            return Err(VectorStoreError::DimensionMismatch {
                query: query.dimension(),
                index: d,
            });
        }
        let k = k.min(self.chunks.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        let q = query.as_slice();
        let scores = par::map_range(mode, self.chunks.len(), |i| {
            dot(q, &self.vectors[i * d..(i + 1) * d])
        });

        let cmp = |a: &usize, b: &usize| {
            scores[*b]
                .total_cmp(&scores[*a])
                .then_with(|| self.chunks[*a].id.cmp(&self.chunks[*b].id))
        };
        let mut order: Vec<usize> = (0..self.chunks.len()).collect();
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);

        let out: Vec<ScoredChunk> = order
            .into_iter()
            .map(|i| ScoredChunk {
                chunk: self.chunks[i].clone(),
                score: scores[i],
                score_kind: ScoreKind::Embedding,
            })
            .collect();
        debug_assert!(out.windows(2).all(|w| rank_order(&w[0], &w[1]).is_le()));
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.descriptor.dimension;
        let mut out = Vec::with_capacity(16 + self.vectors.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(self.chunks.len() as u32).to_le_bytes());
        let id = self.descriptor.embedder_id.as_bytes();
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id);
        for (i, c) in self.chunks.iter().enumerate() {
            for s in [&c.id, &c.product, &c.provider_id, &c.text] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            let digest = hex::decode(&c.content_digest).expect("validated digest is hex");
            out.extend_from_slice(&digest);
            for v in &self.vectors[i * d..(i + 1) * d] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VectorStoreError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(VectorStoreError::IncompatibleIndex(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let dimension = r.u32()? as usize;
        let count = r.u32()? as usize;
        let id_len = r.u16()? as usize;
        let embedder_id = r.string(id_len)?;
        if dimension == 0 {
            return Err(VectorStoreError::CorruptIndex("zero dimension".into()));
        }

        let mut chunks = Vec::with_capacity(count.min(1 << 20));
        let mut vectors = Vec::with_capacity(count.min(1 << 20) * dimension);
        let mut seen = HashSet::new();
        for _ in 0..count {
            let mut fields = Vec::with_capacity(4);
            for _ in 0..4 {
                let len = r.u32()? as usize;
                fields.push(r.string(len)?);
            }
            let digest = hex::encode(r.take(32)?);
            let text = fields.pop().unwrap();
            let provider_id = fields.pop().unwrap();
            let product = fields.pop().unwrap();
            let id = fields.pop().unwrap();
            let chunk = Chunk {
                id,
                text,
                product,
                provider_id,
                content_digest: digest,
            };
            chunk
                .validate()
                .map_err(|e| VectorStoreError::CorruptIndex(e.to_string()))?;
            if !seen.insert(chunk.id.clone()) {
                return Err(VectorStoreError::CorruptIndex(format!(
                    "duplicate chunk id {}",
                    chunk.id
                )));
            }
            let raw = r.take(dimension * 4)?;
            vectors.extend(
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            );
            chunks.push(chunk);
        }
        if r.pos != bytes.len() {
            return Err(VectorStoreError::CorruptIndex(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let product = chunks.first().map(|c| c.product.clone()).unwrap_or_default();
        if let Some(c) = chunks.iter().find(|c| c.product != product) {
            return Err(VectorStoreError::CorruptIndex(format!(
                "chunk {} from a different product",
                c.id
            )));
        }
        Ok(Self {
            descriptor: EmbedderDescriptor {
                embedder_id,
                dimension,
            },
            product,
            chunks,
            vectors,
        })
    }
}

pub fn save_index(index: &VectorIndex, path: &Path) -> Result<(), VectorStoreError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&index.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

/// Loads an index. The product name is taken from the stored chunks; an empty
/// index loads with an empty product name.
pub fn load_index(path: &Path) -> Result<VectorIndex, VectorStoreError> {
    VectorIndex::from_bytes(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], VectorStoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|end| *end <= self.bytes.len())
            .ok_or_else(|| {
                VectorStoreError::CorruptIndex(format!(
                    "truncated at byte {} (wanted {n} more)",
                    self.pos
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, VectorStoreError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, VectorStoreError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, len: usize) -> Result<String, VectorStoreError> {
        let b = self.take(len)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| VectorStoreError::CorruptIndex("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashedEmbedder;

    fn corpus(n: usize) -> Vec<Chunk> {
        (0..n)
            .map(|i| {
                Chunk::new("site1", "pubmed", &i.to_string(), format!("doc {i} about topic {}", i % 7))
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn empty_ingest_is_valid() {
        let idx = VectorIndex::ingest("pubmed", vec![], &HashedEmbedder::default()).unwrap();
        assert!(idx.is_empty());
        assert_eq!(idx.stats().count, 0);
        let q = HashedEmbedder::default().embed_text("x");
        assert!(idx.top_k(&q, 8).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut chunks = corpus(2);
        chunks[1] = Chunk::new("site1", "pubmed", "0", "other").unwrap();
        assert!(matches!(
            VectorIndex::ingest("pubmed", chunks, &HashedEmbedder::default()),
            Err(VectorStoreError::DuplicateChunk(id)) if id == "site1/pubmed/0"
        ));
    }

    #[test]
    fn wrong_product_rejected() {
        assert!(matches!(
            VectorIndex::ingest("wiki", corpus(1), &HashedEmbedder::default()),
            Err(VectorStoreError::WrongProduct { .. })
        ));
    }

    #[test]
    fn k_zero_and_exact_self_match() {
        let e = HashedEmbedder::default();
        let c = Chunk::new("p", "x", "only", "myocardial infarction risk").unwrap();
        let idx = VectorIndex::ingest("x", vec![c.clone()], &e).unwrap();
        let q = e.embed_text(&c.text);
        assert!(idx.top_k(&q, 0).unwrap().is_empty());
        let hits = idx.top_k(&q, 5).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].chunk, c);
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert_eq!(hits[0].score_kind, ScoreKind::Embedding);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let idx = VectorIndex::ingest("pubmed", corpus(3), &HashedEmbedder::default()).unwrap();
        let q = HashedEmbedder::new(16).embed_text("doc");
        assert!(matches!(
            idx.top_k(&q, 1),
            Err(VectorStoreError::DimensionMismatch { query: 16, index: 256 })
        ));
    }

    #[test]
    fn stats_reads_descriptor() {
        let idx = VectorIndex::ingest("pubmed", corpus(100), &HashedEmbedder::default()).unwrap();
        assert_eq!(
            idx.stats(),
            DataProduct {
                name: "pubmed".into(),
                count: 100,
                embedder_id: "hashed-v1".into(),
                dimension: 256
            }
        );
    }

    #[test]
    fn bad_magic_and_truncation() {
        let idx = VectorIndex::ingest("pubmed", corpus(5), &HashedEmbedder::default()).unwrap();
        let mut bytes = idx.to_bytes();
        assert_eq!(VectorIndex::from_bytes(&bytes).unwrap(), idx);

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            VectorIndex::from_bytes(truncated),
            Err(VectorStoreError::CorruptIndex(_))
        ));
        bytes[3] = b'9';
        assert!(matches!(
            VectorIndex::from_bytes(&bytes),
            Err(VectorStoreError::IncompatibleIndex(_))
        ));
    }
}
