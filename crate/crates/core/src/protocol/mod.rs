//! Domain types shared by providers, the orchestrator and clients, plus the
//! length-prefixed JSON framing used on every connection.

mod codec;

pub use codec::{decode_frame, encode_frame, read_message, write_message, FrameError, MAX_FRAME_LEN};

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attestation::AttestationEvidence;
use crate::orchestrator::AnswerRecord;
use crate::vector_store::DataProduct;

/// SHA-256 of the UTF-8 bytes of `text`, lowercase hex.
pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Random 128-bit value rendered as 32 lowercase hex chars.
pub fn random_nonce() -> String {
    let bytes: [u8; 16] = rand::random();
    hex::encode(bytes)
}

pub(crate) fn is_hex_nonce(s: &str) -> bool {
    s.len() == 32 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChunkError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("{field} {value:?} must not contain '/'")]
    Separator { field: &'static str, value: String },
    #[error("malformed chunk id {0:?}")]
    BadId(String),
    #[error("content digest mismatch for chunk {0}")]
    DigestMismatch(String),
}

/// A retrievable unit of text with provenance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub text: String,
    pub product: String,
    pub provider_id: String,
    pub content_digest: String,
}

impl Chunk {
    pub fn new(
        provider_id: &str,
        product: &str,
        local_id: &str,
        text: impl Into<String>,
    ) -> Result<Self, ChunkError> {
        for (field, value) in [
            ("provider id", provider_id),
            ("product", product),
            ("local id", local_id),
        ] {
            if value.is_empty() {
                return Err(ChunkError::Empty(field));
            }
            if value.contains('/') {
                return Err(ChunkError::Separator {
                    field,
                    value: value.to_string(),
                });
            }
        }
        let text = text.into();
        if text.is_empty() {
            return Err(ChunkError::Empty("text"));
        }
        Ok(Self {
            id: format!("{provider_id}/{product}/{local_id}"),
            content_digest: content_hash(&text),
            text,
            product: product.to_string(),
            provider_id: provider_id.to_string(),
        })
    }

    /// Same chunk with replaced text and a recomputed digest.
    pub fn with_text(&self, text: String) -> Self {
        Self {
            content_digest: content_hash(&text),
            text,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ChunkError> {
        if self.text.is_empty() {
            return Err(ChunkError::Empty("text"));
        }
        let parts: Vec<&str> = self.id.split('/').collect();
        match parts.as_slice() {
            [provider, product, local]
                if !provider.is_empty()
                    && !local.is_empty()
                    && *provider == self.provider_id
                    && *product == self.product => {}
            _ => return Err(ChunkError::BadId(self.id.clone())),
        }
        if content_hash(&self.text) != self.content_digest {
            return Err(ChunkError::DigestMismatch(self.id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Embedding,
    Rerank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk: Chunk,
    pub score: f64,
    pub score_kind: ScoreKind,
}

/// Ranking order used everywhere: score descending, then chunk id ascending.
pub fn rank_order(a: &ScoredChunk, b: &ScoredChunk) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.chunk.id.cmp(&b.chunk.id))
}

pub fn is_ranked(chunks: &[ScoredChunk]) -> bool {
    chunks
        .windows(2)
        .all(|w| rank_order(&w[0], &w[1]) != Ordering::Greater)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    pub nonce: String,
}

impl Query {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            query_id: random_nonce(),
            text: text.into(),
            nonce: random_nonce(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    EmbeddingRank,
    Rerank,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::EmbeddingRank => "embedding_rank",
            Strategy::Rerank => "rerank",
        }
    }
}

/// Which live providers receive a query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SiteSelectionRepr", into = "SiteSelectionRepr")]
pub enum SiteSelection {
    All,
    Explicit(Vec<String>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SiteSelectionRepr {
    Keyword(String),
    List(Vec<String>),
}

impl TryFrom<SiteSelectionRepr> for SiteSelection {
    type Error = String;

    fn try_from(repr: SiteSelectionRepr) -> Result<Self, Self::Error> {
        match repr {
            SiteSelectionRepr::Keyword(k) if k == "all" => Ok(SiteSelection::All),
            SiteSelectionRepr::Keyword(k) => Err(format!("unknown site selection {k:?}")),
            SiteSelectionRepr::List(ids) => Ok(SiteSelection::Explicit(ids)),
        }
    }
}

impl From<SiteSelection> for SiteSelectionRepr {
    fn from(s: SiteSelection) -> Self {
        match s {
            SiteSelection::All => SiteSelectionRepr::Keyword("all".into()),
            SiteSelection::Explicit(ids) => SiteSelectionRepr::List(ids),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid federation config: {0}")]
pub struct ConfigError(pub String);

/// Query-time federation parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    /// Local context size per data product.
    pub m: u32,
    /// Global context size after aggregation.
    pub n: u32,
    pub site_selection: SiteSelection,
    pub strategy: Strategy,
    pub deadline_ms: u64,
    pub dedup: bool,
    /// Fall back to embedding rank when the re-rank scorer fails.
    pub rerank_fallback: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            m: 8,
            n: 8,
            site_selection: SiteSelection::All,
            strategy: Strategy::Rerank,
            deadline_ms: 10_000,
            dedup: true,
            rerank_fallback: false,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.m == 0 || self.n == 0 {
            return Err(ConfigError("m and n must be at least 1".into()));
        }
        if self.deadline_ms == 0 {
            return Err(ConfigError("deadline_ms must be positive".into()));
        }
        if let SiteSelection::Explicit(ids) = &self.site_selection {
            if ids.is_empty() {
                return Err(ConfigError("explicit site selection is empty".into()));
            }
            let mut seen = HashSet::new();
            if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
                return Err(ConfigError(format!("duplicate site {dup:?} in selection")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalRequest {
    pub query_id: String,
    pub query_text: String,
    pub m: u32,
    pub nonce: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResponse {
    pub provider_id: String,
    pub per_product: BTreeMap<String, Vec<ScoredChunk>>,
    pub elapsed_ms: u64,
}

impl RetrievalResponse {
    /// Checks ordering, provenance, digests and (when given) the per-product bound.
    pub fn validate(&self, m: Option<u32>) -> Result<(), String> {
        for (product, list) in &self.per_product {
            if let Some(m) = m {
                if list.len() > m as usize {
                    return Err(format!(
                        "product {product} returned {} chunks, bound is {m}",
                        list.len()
                    ));
                }
            }
            if !is_ranked(list) {
                return Err(format!("product {product} list is not ranked"));
            }
            for sc in list {
                if !sc.score.is_finite() {
                    return Err(format!("non-finite score on {}", sc.chunk.id));
                }
                if sc.chunk.provider_id != self.provider_id {
                    return Err(format!(
                        "chunk {} does not belong to provider {}",
                        sc.chunk.id, self.provider_id
                    ));
                }
                sc.chunk.validate().map_err(|e| e.to_string())?;
            }
        }
        Ok(())
    }

    pub fn chunk_count(&self) -> usize {
        self.per_product.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Empty {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Register {
    pub provider_id: String,
    pub products: Vec<DataProduct>,
    /// Challenge the orchestrator must echo in its evidence.
    pub challenge_nonce: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidencePayload {
    pub evidence: AttestationEvidence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceResult {
    pub accepted: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalTask {
    pub task_id: u64,
    pub request: RetrievalRequest,
}

/// `task` is `None` when a long poll expires without work.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPayload {
    pub task: Option<RetrievalTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: u64,
    pub response: Option<RetrievalResponse>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderProducts {
    pub provider_id: String,
    pub products: Vec<DataProduct>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductsPayload {
    pub providers: Vec<ProviderProducts>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerPayload {
    pub record: AnswerRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: String,
    pub message: String,
}

impl ErrorPayload {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

pub(crate) const MESSAGE_TYPES: [&str; 11] = [
    "REGISTER",
    "EVIDENCE",
    "EVIDENCE_RESULT",
    "TASK_POLL",
    "TASK",
    "TASK_RESULT",
    "LIST_PRODUCTS",
    "PRODUCTS",
    "QUERY",
    "ANSWER",
    "ERROR",
];

/// Every frame on the wire carries exactly one of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Register(Register),
    Evidence(EvidencePayload),
    EvidenceResult(EvidenceResult),
    TaskPoll(Empty),
    Task(TaskPayload),
    TaskResult(TaskResult),
    ListProducts(Empty),
    Products(ProductsPayload),
    Query(QueryRequest),
    Answer(AnswerPayload),
    Error(ErrorPayload),
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Register(_) => "REGISTER",
            Message::Evidence(_) => "EVIDENCE",
            Message::EvidenceResult(_) => "EVIDENCE_RESULT",
            Message::TaskPoll(_) => "TASK_POLL",
            Message::Task(_) => "TASK",
            Message::TaskResult(_) => "TASK_RESULT",
            Message::ListProducts(_) => "LIST_PRODUCTS",
            Message::Products(_) => "PRODUCTS",
            Message::Query(_) => "QUERY",
            Message::Answer(_) => "ANSWER",
            Message::Error(_) => "ERROR",
        }
    }

    /// Content checks applied to every decoded frame.
    pub(crate) fn validate_content(&self) -> Result<(), String> {
        if let Message::TaskResult(TaskResult {
            response: Some(resp),
            ..
        }) = self
        {
            resp.validate(None)?;
        }
        Ok(())
    }
}
