//! A data-provider node. It dials out to the orchestrator, verifies the
//! orchestrator's attestation evidence, and only then serves retrieval tasks
//! from its data products. It never listens for inbound connections.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use regex::Regex;
use rustls::pki_types::ServerName;
use tokio::net::TcpStream;
use tokio_rustls::TlsConnector;

use crate::attestation::{now_ms, verify_evidence, AttestationPolicy, Verdict};
use crate::embedding::Embedder;
use crate::protocol::{
    random_nonce, Chunk, Empty, EvidenceResult, FrameError, Message, Register, RetrievalRequest,
    RetrievalResponse, ScoredChunk, TaskResult,
};
use crate::transport::{Framed, Stream, WireTap};
use crate::vector_store::{DataProduct, VectorIndex, VectorStoreError};

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("attestation failed: {0}")]
    AttestationFailed(String),
    #[error("registration rejected: {code}: {message}")]
    Rejected { code: String, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("embedder mismatch: {0}")]
    EmbedderMismatch(String),
    #[error(transparent)]
    Store(#[from] VectorStoreError),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Debug, Clone)]
pub struct FilterRule {
    pattern: Regex,
    replacement: String,
}

impl FilterRule {
    pub fn new(pattern: &str, replacement: &str) -> Result<Self, ProviderError> {
        let pattern = Regex::new(pattern)
            .map_err(|e| ProviderError::Config(format!("filter pattern {pattern:?}: {e}")))?;
        Ok(Self {
            pattern,
            replacement: replacement.to_string(),
        })
    }

    pub fn pattern(&self) -> &Regex {
        &self.pattern
    }
}

/// Ordered redaction rules applied to every outgoing chunk.
#[derive(Debug, Clone, Default)]
pub struct FilterRules(Vec<FilterRule>);

impl FilterRules {
    pub fn new(rules: Vec<FilterRule>) -> Self {
        Self(rules)
    }

    /// One rule per line: `pattern<TAB>replacement`. Blank lines and lines
    /// starting with `#` are skipped; a line without a tab redacts to "".
    pub fn parse(text: &str) -> Result<Self, ProviderError> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (pattern, replacement) = line.split_once('\t').unwrap_or((line, ""));
            let rule = FilterRule::new(pattern, replacement)
                .map_err(|e| ProviderError::Config(format!("filters line {}: {e}", i + 1)))?;
            rules.push(rule);
        }
        Ok(Self(rules))
    }

    pub fn rules(&self) -> &[FilterRule] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Applies every rule in order. `None` when the text ends up empty.
    pub fn redact(&self, chunk: &Chunk) -> Option<Chunk> {
        if self.0.is_empty() {
            return Some(chunk.clone());
        }
        let mut text = chunk.text.clone();
        for rule in &self.0 {
            text = rule
                .pattern
                .replace_all(&text, rule.replacement.as_str())
                .into_owned();
        }
        if text.is_empty() {
            None
        } else if text == chunk.text {
            Some(chunk.clone())
        } else {
            Some(chunk.with_text(text))
        }
    }
}

pub fn apply_filters(chunks: &[Chunk], rules: &FilterRules) -> Vec<Chunk> {
    chunks.iter().filter_map(|c| rules.redact(c)).collect()
}

struct Product {
    index: VectorIndex,
    embedder: Arc<dyn Embedder>,
}

pub struct ProviderRuntime {
    provider_id: String,
    products: BTreeMap<String, Product>,
    policy: AttestationPolicy,
    filters: FilterRules,
    response_delay: Option<Duration>,
}

impl ProviderRuntime {
    pub fn new(provider_id: impl Into<String>, policy: AttestationPolicy) -> Self {
        Self {
            provider_id: provider_id.into(),
            products: BTreeMap::new(),
            policy,
            filters: FilterRules::default(),
            response_delay: None,
        }
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn policy(&self) -> &AttestationPolicy {
        &self.policy
    }

    pub fn with_filters(mut self, filters: FilterRules) -> Self {
        self.filters = filters;
        self
    }

    /// Delays every task result; used to simulate a slow or stalled site.
    pub fn with_response_delay(mut self, delay: Duration) -> Self {
        self.response_delay = Some(delay);
        self
    }

    pub fn add_product(&mut self, index: VectorIndex, embedder: Arc<dyn Embedder>) -> Result<(), ProviderError> {
        let name = index.product().to_string();
        if name.is_empty() {
            return Err(ProviderError::Config("product name is empty".into()));
        }
        if self.products.contains_key(&name) {
            return Err(ProviderError::Config(format!("duplicate product {name}")));
        }
        if let Some(c) = index.chunks().iter().find(|c| c.provider_id != self.provider_id) {
            return Err(ProviderError::Config(format!(
                "chunk {} in product {name} belongs to provider {}",
                c.id, c.provider_id
            )));
        }
        let have = embedder.descriptor();
        let want = index.descriptor();
        if have.embedder_id != want.embedder_id
            || (have.dimension != 0 && have.dimension != want.dimension)
        {
            return Err(ProviderError::EmbedderMismatch(format!(
                "product {name} was built with {}/{} but serves {}/{}",
                want.embedder_id, want.dimension, have.embedder_id, have.dimension
            )));
        }
        self.products.insert(name, Product { index, embedder });
        Ok(())
    }

    pub fn list_products(&self) -> Vec<DataProduct> {
        self.products.values().map(|p| p.index.stats()).collect()
    }

    /// Per product: embed the query, take the local top-m, redact.
    pub fn handle_retrieval(&self, request: &RetrievalRequest) -> Result<RetrievalResponse, ProviderError> {
        if request.m == 0 {
            return Err(ProviderError::Protocol("m must be at least 1".into()));
        }
        let started = Instant::now();
        let mut per_product = BTreeMap::new();
        for (name, product) in &self.products {
            let query = product
                .embedder
                .embed(&request.query_text)
                .map_err(|e| ProviderError::EmbedderMismatch(e.to_string()))?;
            let hits = product.index.top_k(&query, request.m as usize)?;
            let hits: Vec<ScoredChunk> = hits
                .into_iter()
                .filter_map(|sc| {
                    self.filters.redact(&sc.chunk).map(|chunk| ScoredChunk { chunk, ..sc })
                })
                .collect();
            per_product.insert(name.clone(), hits);
        }
        Ok(RetrievalResponse {
            provider_id: self.provider_id.clone(),
            per_product,
            elapsed_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Runs one session over an established stream: REGISTER, verify the
/// orchestrator's evidence, then poll for tasks until the orchestrator
/// closes the connection. No TASK_RESULT is ever sent unless the evidence
/// was accepted.
pub async fn run_session<S: Stream>(mut conn: Framed<S>, runtime: Arc<ProviderRuntime>) -> Result<(), ProviderError> {
    let challenge = random_nonce();
    conn.send(&Message::Register(Register {
        provider_id: runtime.provider_id.clone(),
        products: runtime.list_products(),
        challenge_nonce: challenge.clone(),
    }))
    .await?;

    let evidence = match conn.recv().await? {
        Message::Evidence(p) => p.evidence,
        Message::Error(e) => {
            return Err(ProviderError::Rejected {
                code: e.code,
                message: e.message,
            })
        }
        other => {
            return Err(ProviderError::Protocol(format!(
                "expected EVIDENCE, got {}",
                other.type_name()
            )))
        }
    };
    match verify_evidence(&evidence, &challenge, &runtime.policy, now_ms()) {
        Verdict::Accept => {
            conn.send(&Message::EvidenceResult(EvidenceResult {
                accepted: true,
                reason: None,
            }))
            .await?;
        }
        Verdict::Reject(reason) => {
            tracing::warn!(provider = %runtime.provider_id, %reason, "orchestrator evidence rejected");
            let _ = conn
                .send(&Message::EvidenceResult(EvidenceResult {
                    accepted: false,
                    reason: Some(reason.to_string()),
                }))
                .await;
            return Err(ProviderError::AttestationFailed(reason.to_string()));
        }
    }
    tracing::info!(provider = %runtime.provider_id, "registered; polling for tasks");

    loop {
        match conn.send(&Message::TaskPoll(Empty {})).await {
            Ok(()) => {}
            Err(FrameError::Io(_)) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
        let task = match conn.recv().await {
            Ok(Message::Task(p)) => p.task,
            Ok(other) => {
                return Err(ProviderError::Protocol(format!(
                    "expected TASK, got {}",
                    other.type_name()
                )))
            }
            Err(FrameError::Closed) | Err(FrameError::Io(_)) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        let Some(task) = task else { continue };

        let rt = Arc::clone(&runtime);
        let request = task.request.clone();
        let outcome = tokio::task::spawn_blocking(move || rt.handle_retrieval(&request))
            .await
            .map_err(|e| ProviderError::Protocol(e.to_string()))?;
        if let Some(delay) = runtime.response_delay {
            tokio::time::sleep(delay).await;
        }
        let result = match outcome {
            Ok(resp) => TaskResult {
                task_id: task.task_id,
                response: Some(resp),
                error: None,
            },
            Err(e) => TaskResult {
                task_id: task.task_id,
                response: None,
                error: Some(e.to_string()),
            },
        };
        if let Err(e) = conn.send(&Message::TaskResult(result)).await {
            return match e {
                FrameError::Io(_) => Ok(()),
                e => Err(e.into()),
            };
        }
    }
}

/// Connection settings for a provider dialing the orchestrator over mTLS.
#[derive(Clone)]
pub struct Dialer {
    pub address: String,
    pub server_name: String,
    pub tls: Arc<rustls::ClientConfig>,
    pub tap: Option<WireTap>,
}

/// Connects, completes the mutual-TLS handshake and runs one session.
pub async fn register(dialer: &Dialer, runtime: Arc<ProviderRuntime>) -> Result<(), ProviderError> {
    let addr: SocketAddr = tokio::net::lookup_host(&dialer.address)
        .await
        .map_err(|e| ProviderError::ConnectionRefused(format!("{}: {e}", dialer.address)))?
        .next()
        .ok_or_else(|| ProviderError::ConnectionRefused(format!("{}: no address", dialer.address)))?;
    let tcp = TcpStream::connect(addr)
        .await
        .map_err(|e| ProviderError::ConnectionRefused(format!("{addr}: {e}")))?;
    let name = ServerName::try_from(dialer.server_name.clone())
        .map_err(|e| ProviderError::Config(format!("server name {}: {e}", dialer.server_name)))?;
    let tls = TlsConnector::from(Arc::clone(&dialer.tls))
        .connect(name, tcp)
        .await
        .map_err(|e| ProviderError::ConnectionRefused(format!("tls handshake: {e}")))?;
    run_session(Framed::with_tap(tls, dialer.tap.clone()), runtime).await
}
