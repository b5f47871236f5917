//! The attested coordinator: distributes a query to provider sessions,
//! collects local contexts, aggregates them inside the sealed scope and
//! generates the answer.

mod aggregate;
mod prompt;
mod record;
mod registry;
mod rerank;

pub use aggregate::{aggregate_embedding_rank, aggregate_rerank, pool_candidates, ContextSet};
pub use prompt::{assemble_prompt, context_block, NO_CONTEXT};
pub use record::{AnswerRecord, AuditEvent, AuditLog, ProviderFailure, Timing};
pub use registry::{select_providers, ProviderRegistry, SessionHandle, TaskEnvelope};
pub use rerank::{score_rerank, OverlapScorer, RelevanceScorer, RemoteScorer, RerankError, OVERLAP_SCORER_ID};

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ed25519_dalek::{SigningKey, VerifyingKey};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinSet;

use crate::attestation::{now_ms, AttestationError, Enclave, Measurement, PipelineManifest, SealedPayload};
use crate::inference::{InferenceBackend, PromptTemplate};
use crate::protocol::{
    AnswerPayload, ConfigError, ErrorPayload, EvidencePayload, FederationConfig, Message,
    ProductsPayload, Query, RetrievalRequest, RetrievalResponse, RetrievalTask, Strategy,
    TaskPayload, TaskResult,
};
use crate::transport::{Framed, Stream};

pub const DEFAULT_POLL_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("no providers available")]
    NoProvidersAvailable,
    #[error("attestation failed: {0}")]
    AttestationFailed(String),
    #[error("retrieval failed: {0}")]
    RetrievalFailed(String),
    #[error(transparent)]
    RerankFailed(#[from] RerankError),
    #[error("inference failed: {0}")]
    InferenceFailed(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Enclave(#[from] AttestationError),
    #[error("internal: {0}")]
    Internal(String),
}

impl OrchestratorError {
    /// Stable code carried in ERROR messages.
    pub fn code(&self) -> &'static str {
        match self {
            OrchestratorError::NoProvidersAvailable => "no-providers-available",
            OrchestratorError::AttestationFailed(_) => "attestation-failed",
            OrchestratorError::RetrievalFailed(_) => "retrieval-failed",
            OrchestratorError::RerankFailed(_) => "rerank-failed",
            OrchestratorError::InferenceFailed(_) => "inference-failed",
            OrchestratorError::Config(_) => "configuration-error",
            OrchestratorError::Enclave(_) => "enclave-error",
            OrchestratorError::Internal(_) => "internal",
        }
    }
}

/// Responses gathered by one fan-out, sorted by provider id.
#[derive(Debug, Default)]
pub struct FanOut {
    pub responses: Vec<RetrievalResponse>,
    pub failures: Vec<ProviderFailure>,
}

/// Queues `request` on every target session and waits for all of them or
/// the shared deadline, whichever comes first. Late, failed and invalid
/// responses become failures.
pub async fn fan_out(
    request: &RetrievalRequest,
    targets: Vec<(String, mpsc::Sender<TaskEnvelope>)>,
    deadline: Duration,
    task_ids: &AtomicU64,
) -> FanOut {
    let until = tokio::time::Instant::now() + deadline;
    let mut set = JoinSet::new();
    for (provider_id, tasks) in targets {
        let task_id = task_ids.fetch_add(1, Ordering::Relaxed);
        let request = request.clone();
        set.spawn(async move {
            let (reply, rx) = oneshot::channel();
            let m = request.m;
            let envelope = TaskEnvelope {
                task_id,
                request,
                reply,
            };
            let outcome = tokio::time::timeout_at(until, async {
                tasks
                    .send(envelope)
                    .await
                    .map_err(|_| "disconnected".to_string())?;
                rx.await.map_err(|_| "disconnected".to_string())?
            })
            .await;
            let outcome = match outcome {
                Err(_) => Err("timeout".to_string()),
                Ok(Err(e)) => Err(e),
                Ok(Ok(resp)) if resp.provider_id != provider_id => Err(format!(
                    "invalid-response: provider id {} on session {provider_id}",
                    resp.provider_id
                )),
                Ok(Ok(resp)) => resp
                    .validate(Some(m))
                    .map(|_| resp)
                    .map_err(|e| format!("invalid-response: {e}")),
            };
            (provider_id, outcome)
        });
    }

    let mut out = FanOut::default();
    while let Some(joined) = set.join_next().await {
        match joined {
            Ok((_, Ok(resp))) => out.responses.push(resp),
            Ok((provider_id, Err(reason))) => out.failures.push(ProviderFailure { provider_id, reason }),
            Err(e) => tracing::warn!(error = %e, "fan-out task panicked"),
        }
    }
    out.responses.sort_by(|a, b| a.provider_id.cmp(&b.provider_id));
    out.failures.sort_by(|a, b| a.provider_id.cmp(&b.provider_id));
    out
}

pub struct OrchestratorSettings {
    pub federation: FederationConfig,
    pub template: PromptTemplate,
    /// Embedders the providers are expected to use; part of the measurement.
    pub embedder_ids: Vec<String>,
    pub scorer: Arc<dyn RelevanceScorer>,
    pub backend: Arc<dyn InferenceBackend>,
    pub signing_key: SigningKey,
    pub audit_dir: Option<PathBuf>,
    pub poll_timeout: Duration,
}

impl OrchestratorSettings {
    pub fn manifest(&self) -> PipelineManifest {
        PipelineManifest {
            strategy: Some(self.federation.strategy.as_str().to_string()),
            embedder_ids: Some(self.embedder_ids.clone()),
            reranker_id: Some(self.scorer.scorer_id().to_string()),
            inference_backend_id: Some(self.backend.backend_id().to_string()),
            prompt_template_hash: Some(self.template.template_hash().to_string()),
            n: Some(self.federation.n),
            m: Some(self.federation.m),
        }
    }
}

pub struct Orchestrator {
    enclave: Enclave,
    config: FederationConfig,
    template: PromptTemplate,
    scorer: Arc<dyn RelevanceScorer>,
    backend: Arc<dyn InferenceBackend>,
    registry: ProviderRegistry,
    audit: Option<AuditLog>,
    task_ids: AtomicU64,
    poll_timeout: Duration,
}

impl Orchestrator {
    pub fn new(settings: OrchestratorSettings) -> Result<Arc<Self>, OrchestratorError> {
        settings.federation.validate()?;
        let enclave = Enclave::new(settings.manifest(), settings.signing_key)?;
        let audit = settings
            .audit_dir
            .as_deref()
            .map(AuditLog::open)
            .transpose()
            .map_err(|e| OrchestratorError::Internal(format!("audit log: {e}")))?;
        Ok(Arc::new(Self {
            enclave,
            config: settings.federation,
            template: settings.template,
            scorer: settings.scorer,
            backend: settings.backend,
            registry: ProviderRegistry::new(),
            audit,
            task_ids: AtomicU64::new(1),
            poll_timeout: settings.poll_timeout,
        }))
    }

    pub fn measurement(&self) -> &Measurement {
        self.enclave.measurement()
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.enclave.verifying_key()
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn backend(&self) -> &Arc<dyn InferenceBackend> {
        &self.backend
    }

    pub fn registry(&self) -> &ProviderRegistry {
        &self.registry
    }

    pub fn audit_path(&self) -> Option<PathBuf> {
        self.audit.as_ref().map(|a| a.path().to_path_buf())
    }

    fn audit(&self, event: AuditEvent<'_>) {
        if let Some(log) = &self.audit {
            log.write(&event);
        }
    }

    /// select → fan-out → seal → aggregate → prompt → generate.
    pub async fn answer_query(self: &Arc<Self>, query: Query) -> Result<AnswerRecord, OrchestratorError> {
        let query_id = query.query_id.clone();
        let result = self.answer_inner(query).await;
        match &result {
            Ok(record) => self.audit(AuditEvent::Answer { record }),
            Err(e) => {
                tracing::info!(query_id = %query_id, code = e.code(), "query failed");
                self.audit(AuditEvent::QueryFailed {
                    query_id: &query_id,
                    code: e.code(),
                });
            }
        }
        result
    }

    async fn answer_inner(self: &Arc<Self>, query: Query) -> Result<AnswerRecord, OrchestratorError> {
        let started = Instant::now();
        let targets = self.registry.select(&self.config.site_selection)?;
        let request = RetrievalRequest {
            query_id: query.query_id.clone(),
            query_text: query.text.clone(),
            m: self.config.m,
            nonce: query.nonce.clone(),
        };
        let targets = targets.into_iter().map(|(id, h)| (id, h.tasks)).collect();
        let FanOut { responses, failures } = fan_out(
            &request,
            targets,
            Duration::from_millis(self.config.deadline_ms),
            &self.task_ids,
        )
        .await;
        if responses.is_empty() {
            let detail = failures
                .iter()
                .map(|f| format!("{}: {}", f.provider_id, f.reason))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(OrchestratorError::RetrievalFailed(detail));
        }
        let participating: Vec<String> = responses.iter().map(|r| r.provider_id.clone()).collect();
        let sealed = responses
            .iter()
            .map(|r| {
                let bytes = serde_json::to_vec(r).map_err(|e| OrchestratorError::Internal(e.to_string()))?;
                Ok(self.enclave.sealer().seal(&bytes, &query.query_id)?)
            })
            .collect::<Result<Vec<SealedPayload>, OrchestratorError>>()?;
        drop(responses);
        let retrieval_ms = started.elapsed().as_millis() as u64;

        let this = Arc::clone(self);
        let q = query.clone();
        let (context, answer_text, aggregation_ms, inference_ms) =
            tokio::task::spawn_blocking(move || this.aggregate_and_generate(&q, sealed))
                .await
                .map_err(|e| OrchestratorError::Internal(e.to_string()))??;

        Ok(AnswerRecord {
            query_id: query.query_id,
            answer_text,
            strategy: context.strategy,
            measurement: self.measurement().0.clone(),
            candidate_count: context.candidate_count,
            context_ids: context.chunks.iter().map(|c| c.chunk.id.clone()).collect(),
            context_digests: context
                .chunks
                .iter()
                .map(|c| c.chunk.content_digest.clone())
                .collect(),
            participating_providers: participating,
            failed_providers: failures,
            timing: Timing {
                retrieval_ms,
                aggregation_ms,
                inference_ms,
                total_ms: started.elapsed().as_millis() as u64,
            },
        })
    }

    /// Runs inside the sealed scope: plaintext context exists only here.
    fn aggregate_and_generate(
        &self,
        query: &Query,
        sealed: Vec<SealedPayload>,
    ) -> Result<(ContextSet, String, u64, u64), OrchestratorError> {
        let t = Instant::now();
        let responses = sealed
            .iter()
            .map(|s| {
                let plain = self.enclave.sealer().unseal(s, &query.query_id)?;
                serde_json::from_slice::<RetrievalResponse>(&plain)
                    .map_err(|e| OrchestratorError::Internal(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let n = self.config.n as usize;
        let dedup = self.config.dedup;
        let context = match self.config.strategy {
            Strategy::EmbeddingRank => aggregate_embedding_rank(&responses, n, dedup),
            Strategy::Rerank => {
                match aggregate_rerank(&query.text, &responses, self.scorer.as_ref(), n, dedup) {
                    Ok(ctx) => ctx,
                    Err(e) if self.config.rerank_fallback => {
                        tracing::warn!(error = %e, "re-rank failed, falling back to embedding rank");
                        aggregate_embedding_rank(&responses, n, dedup)
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        let aggregation_ms = t.elapsed().as_millis() as u64;

        let t = Instant::now();
        let prompt = assemble_prompt(&query.text, &context.chunks, &self.template);
        let answer = self
            .backend
            .generate(&prompt)
            .map_err(|e| OrchestratorError::InferenceFailed(e.to_string()))?;
        Ok((context, answer, aggregation_ms, t.elapsed().as_millis() as u64))
    }

    /// Serves one provider connection: identity check, attestation
    /// handshake, then the long-poll task loop until the provider leaves.
    pub async fn serve_provider<S: Stream>(self: Arc<Self>, mut conn: Framed<S>, peer_identity: Option<String>) {
        let register = match conn.recv().await {
            Ok(Message::Register(r)) => r,
            Ok(other) => {
                let _ = conn
                    .send(&Message::Error(ErrorPayload::new(
                        "unexpected-message",
                        format!("expected REGISTER, got {}", other.type_name()),
                    )))
                    .await;
                return;
            }
            Err(e) => {
                tracing::debug!(error = %e, "provider connection closed before REGISTER");
                return;
            }
        };
        let provider_id = register.provider_id.clone();
        if let Some(cn) = &peer_identity {
            if *cn != provider_id {
                tracing::warn!(certificate = %cn, claimed = %provider_id, "provider identity mismatch");
                let _ = conn
                    .send(&Message::Error(ErrorPayload::new(
                        "identity-mismatch",
                        format!("certificate is for {cn}, not {provider_id}"),
                    )))
                    .await;
                return;
            }
        }
        let evidence = match self.enclave.evidence_for(&register.challenge_nonce) {
            Ok(ev) => ev,
            Err(e) => {
                let _ = conn
                    .send(&Message::Error(ErrorPayload::new("bad-challenge", e.to_string())))
                    .await;
                return;
            }
        };
        if conn
            .send(&Message::Evidence(EvidencePayload { evidence }))
            .await
            .is_err()
        {
            return;
        }
        match conn.recv().await {
            Ok(Message::EvidenceResult(r)) if r.accepted => {}
            Ok(Message::EvidenceResult(r)) => {
                let reason = r.reason.unwrap_or_else(|| "rejected".into());
                tracing::warn!(provider = %provider_id, %reason, "provider refused attestation");
                self.registry.record_refusal(&provider_id, &reason);
                self.audit(AuditEvent::AttestationRefused {
                    provider_id: &provider_id,
                    reason: &reason,
                });
                return;
            }
            _ => return,
        }

        let (tx, mut rx) = mpsc::channel::<TaskEnvelope>(16);
        let session_id = self.registry.next_session_id();
        self.registry.insert(
            &provider_id,
            SessionHandle {
                session_id,
                tasks: tx,
                products: register.products.clone(),
                registered_at: now_ms(),
            },
        );
        self.audit(AuditEvent::Registered {
            provider_id: &provider_id,
            products: &register.products,
        });
        tracing::info!(provider = %provider_id, products = register.products.len(), "provider registered");

        self.poll_loop(&mut conn, &mut rx).await;

        if self.registry.remove(&provider_id, session_id) {
            self.audit(AuditEvent::Disconnected {
                provider_id: &provider_id,
            });
        }
        tracing::info!(provider = %provider_id, "provider session ended");
    }

    async fn poll_loop<S: Stream>(&self, conn: &mut Framed<S>, rx: &mut mpsc::Receiver<TaskEnvelope>) {
        loop {
            match conn.recv().await {
                Ok(Message::TaskPoll(_)) => {}
                _ => return,
            }
            let sleep = tokio::time::sleep(self.poll_timeout);
            tokio::pin!(sleep);
            let next = loop {
                tokio::select! {
                    biased;
                    env = rx.recv() => match env {
                        Some(env) if env.reply.is_closed() => continue,
                        Some(env) => break Some(env),
                        None => return,
                    },
                    _ = &mut sleep => break None,
                    // Providers are silent while a poll is pending; anything here ends the session.
                    _ = conn.recv() => return,
                }
            };
            let Some(env) = next else {
                if conn.send(&Message::Task(TaskPayload { task: None })).await.is_err() {
                    return;
                }
                continue;
            };
            let task = RetrievalTask {
                task_id: env.task_id,
                request: env.request,
            };
            if conn
                .send(&Message::Task(TaskPayload { task: Some(task) }))
                .await
                .is_err()
            {
                return;
            }
            match conn.recv().await {
                Ok(Message::TaskResult(TaskResult {
                    task_id,
                    response,
                    error,
                })) if task_id == env.task_id => {
                    let outcome = match (response, error) {
                        (Some(resp), None) => Ok(resp),
                        (_, Some(e)) => Err(format!("provider-error: {e}")),
                        (None, None) => Err("provider-error: empty result".to_string()),
                    };
                    let _ = env.reply.send(outcome);
                }
                _ => return,
            }
        }
    }

    /// Serves one client connection: QUERY → ANSWER | ERROR, LIST_PRODUCTS → PRODUCTS.
    pub async fn serve_client<S: Stream>(self: Arc<Self>, mut conn: Framed<S>) {
        loop {
            let reply = match conn.recv().await {
                Ok(Message::Query(q)) => match self.answer_query(Query::new(q.text)).await {
                    Ok(record) => Message::Answer(AnswerPayload { record }),
                    Err(e) => Message::Error(ErrorPayload::new(e.code(), e.to_string())),
                },
                Ok(Message::ListProducts(_)) => Message::Products(ProductsPayload {
                    providers: self.registry.products(),
                }),
                Ok(other) => Message::Error(ErrorPayload::new(
                    "unexpected-message",
                    format!("clients may send QUERY or LIST_PRODUCTS, not {}", other.type_name()),
                )),
                Err(crate::protocol::FrameError::Closed) => return,
                Err(e) => {
                    let _ = conn
                        .send(&Message::Error(ErrorPayload::new("malformed-frame", e.to_string())))
                        .await;
                    return;
                }
            };
            if conn.send(&reply).await.is_err() {
                return;
            }
        }
    }
}
