//! Software-simulated enclave for the orchestrator.
//!
//! The orchestrator's pipeline configuration is measured into a SHA-256
//! digest. Providers challenge the orchestrator with a fresh nonce and accept
//! signed evidence only if the measurement is on their allow-list, the nonce
//! is theirs and the evidence is recent. Retrieved context is sealed with
//! ChaCha20-Poly1305 under a per-session key while it sits outside the
//! aggregation scope.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::protocol::is_hex_nonce;

pub const DEFAULT_MAX_EVIDENCE_AGE_MS: u64 = 60_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttestationError {
    #[error("incomplete manifest: missing {0}")]
    IncompleteManifest(&'static str),
    #[error("invalid manifest field {field}: {reason}")]
    InvalidManifest { field: &'static str, reason: String },
    #[error("malformed nonce {0:?}: expected 32 lowercase hex chars")]
    MalformedNonce(String),
    #[error("invalid key: {0}")]
    InvalidKey(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("unsealing failed")]
    UnsealingFailed,
    #[error("sealing nonce space exhausted")]
    NonceExhausted,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Everything a provider must trust about the orchestrator's pipeline.
/// Fields are optional so that a partially written config can be reported
/// precisely instead of failing to parse.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineManifest {
    pub strategy: Option<String>,
    pub embedder_ids: Option<Vec<String>>,
    pub reranker_id: Option<String>,
    pub inference_backend_id: Option<String>,
    pub prompt_template_hash: Option<String>,
    pub n: Option<u32>,
    pub m: Option<u32>,
}

impl PipelineManifest {
    /// Canonical form: sorted `key=value` lines, each terminated by `\n`.
    /// Embedder ids are sorted, de-duplicated and comma-joined.
    pub fn canonical(&self) -> Result<String, AttestationError> {
        fn text<'a>(
            field: &'static str,
            v: &'a Option<String>,
        ) -> Result<&'a str, AttestationError> {
            let v = v
                .as_deref()
                .filter(|s| !s.is_empty())
                .ok_or(AttestationError::IncompleteManifest(field))?;
            if v.contains('\n') {
                return Err(AttestationError::InvalidManifest {
                    field,
                    reason: "contains a newline".into(),
                });
            }
            Ok(v)
        }

        let strategy = text("strategy", &self.strategy)?;
        let reranker = text("reranker_id", &self.reranker_id)?;
        let backend = text("inference_backend_id", &self.inference_backend_id)?;
        let template = text("prompt_template_hash", &self.prompt_template_hash)?;
        let n = self.n.ok_or(AttestationError::IncompleteManifest("n"))?;
        let m = self.m.ok_or(AttestationError::IncompleteManifest("m"))?;
        let ids = self
            .embedder_ids
            .as_ref()
            .filter(|ids| !ids.is_empty())
            .ok_or(AttestationError::IncompleteManifest("embedder_ids"))?;
        let ids: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        if let Some(bad) = ids
            .iter()
            .find(|id| id.is_empty() || id.contains(',') || id.contains('\n'))
        {
            return Err(AttestationError::InvalidManifest {
                field: "embedder_ids",
                reason: format!("bad id {bad:?}"),
            });
        }
        let ids = ids.into_iter().collect::<Vec<_>>().join(",");

        Ok(format!(
            "embedder_ids={ids}\n\
             inference_backend_id={backend}\n\
             m={m}\n\
             n={n}\n\
             prompt_template_hash={template}\n\
             reranker_id={reranker}\n\
             strategy={strategy}\n"
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Measurement(pub String);

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn measure(manifest: &PipelineManifest) -> Result<Measurement, AttestationError> {
    let canonical = manifest.canonical()?;
    Ok(Measurement(hex::encode(Sha256::digest(canonical.as_bytes()))))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationEvidence {
    pub measurement: Measurement,
    pub nonce: String,
    pub issued_at: u64,
    /// Base64 Ed25519 signature over `measurement ‖ nonce ‖ issued_at`
    /// (raw digest bytes, raw nonce bytes, big-endian u64).
    pub signature: String,
}

fn signed_bytes(measurement: &Measurement, nonce: &str, issued_at: u64) -> Option<Vec<u8>> {
    let mut out = hex::decode(&measurement.0).ok()?;
    if out.len() != 32 {
        return None;
    }
    out.extend(hex::decode(nonce).ok()?);
    out.extend_from_slice(&issued_at.to_be_bytes());
    Some(out)
}

pub fn issue_evidence(
    measurement: &Measurement,
    challenger_nonce: &str,
    key: &SigningKey,
    issued_at: u64,
) -> Result<AttestationEvidence, AttestationError> {
    if !is_hex_nonce(challenger_nonce) {
        return Err(AttestationError::MalformedNonce(challenger_nonce.to_string()));
    }
    let msg = signed_bytes(measurement, challenger_nonce, issued_at).ok_or_else(|| {
        AttestationError::InvalidManifest {
            field: "measurement",
            reason: "not a 64-char hex digest".into(),
        }
    })?;
    Ok(AttestationEvidence {
        measurement: measurement.clone(),
        nonce: challenger_nonce.to_string(),
        issued_at,
        signature: B64.encode(key.sign(&msg).to_bytes()),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationPolicy {
    pub allowed_measurements: BTreeSet<Measurement>,
    #[serde(default = "default_max_age")]
    pub max_evidence_age_ms: u64,
    /// Hex-encoded Ed25519 verifying key of the orchestrator enclave.
    pub attestation_public_key: String,
}

fn default_max_age() -> u64 {
    DEFAULT_MAX_EVIDENCE_AGE_MS
}

impl AttestationPolicy {
    pub fn new(
        allowed: impl IntoIterator<Item = Measurement>,
        public_key: &VerifyingKey,
    ) -> Result<Self, AttestationError> {
        let policy = Self {
            allowed_measurements: allowed.into_iter().collect(),
            max_evidence_age_ms: DEFAULT_MAX_EVIDENCE_AGE_MS,
            attestation_public_key: hex::encode(public_key.as_bytes()),
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), AttestationError> {
        if self.allowed_measurements.is_empty() {
            return Err(AttestationError::InvalidPolicy("empty allow-list".into()));
        }
        self.verifying_key()?;
        Ok(())
    }

    pub fn verifying_key(&self) -> Result<VerifyingKey, AttestationError> {
        let bytes: [u8; 32] = hex::decode(&self.attestation_public_key)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| AttestationError::InvalidKey("expected 32 hex-encoded bytes".into()))?;
        VerifyingKey::from_bytes(&bytes).map_err(|e| AttestationError::InvalidKey(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    MalformedEvidence,
    BadSignature,
    UnknownMeasurement,
    NonceMismatch,
    StaleEvidence,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::MalformedEvidence => "malformed-evidence",
            RejectReason::BadSignature => "bad-signature",
            RejectReason::UnknownMeasurement => "unknown-measurement",
            RejectReason::NonceMismatch => "nonce-mismatch",
            RejectReason::StaleEvidence => "stale-evidence",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

/// Checks, in order: signature, allow-list, nonce, age. The first failure wins.
pub fn verify_evidence(
    evidence: &AttestationEvidence,
    expected_nonce: &str,
    policy: &AttestationPolicy,
    now_ms: u64,
) -> Verdict {
    use RejectReason::*;

    let Ok(key) = policy.verifying_key() else {
        return Verdict::Reject(BadSignature);
    };
    let Some(msg) = signed_bytes(&evidence.measurement, &evidence.nonce, evidence.issued_at)
    else {
        return Verdict::Reject(MalformedEvidence);
    };
    let sig = B64
        .decode(&evidence.signature)
        .ok()
        .and_then(|b| <[u8; 64]>::try_from(b).ok())
        .map(|b| Signature::from_bytes(&b));
    let Some(sig) = sig else {
        return Verdict::Reject(MalformedEvidence);
    };
    if key.verify(&msg, &sig).is_err() {
        return Verdict::Reject(BadSignature);
    }
    if !policy.allowed_measurements.contains(&evidence.measurement) {
        return Verdict::Reject(UnknownMeasurement);
    }
    if evidence.nonce != expected_nonce {
        return Verdict::Reject(NonceMismatch);
    }
    if now_ms.saturating_sub(evidence.issued_at) > policy.max_evidence_age_ms {
        return Verdict::Reject(StaleEvidence);
    }
    Verdict::Accept
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedPayload {
    pub ciphertext: Vec<u8>,
    pub nonce: [u8; 12],
    pub tag: [u8; 16],
}

/// AEAD under one session key with counter nonces (4 zero bytes ‖ u64 BE).
pub struct Sealer {
    cipher: ChaCha20Poly1305,
    counter: AtomicU64,
}

impl fmt::Debug for Sealer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Sealer")
            .field("counter", &self.counter.load(Ordering::Relaxed))
            .finish_non_exhaustive()
    }
}

impl Sealer {
    pub fn new(key: &[u8; 32]) -> Self {
        Self {
            cipher: ChaCha20Poly1305::new(Key::from_slice(key)),
            counter: AtomicU64::new(0),
        }
    }

    pub fn random() -> Self {
        Self::new(&rand::random())
    }

    pub fn seal(&self, plaintext: &[u8], query_id: &str) -> Result<SealedPayload, AttestationError> {
        let counter = self
            .counter
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| c.checked_add(1))
            .map_err(|_| AttestationError::NonceExhausted)?;
        let mut nonce = [0u8; 12];
        nonce[4..].copy_from_slice(&counter.to_be_bytes());
        let mut ciphertext = plaintext.to_vec();
        let tag = self
            .cipher
            .encrypt_in_place_detached(Nonce::from_slice(&nonce), query_id.as_bytes(), &mut ciphertext)
            .map_err(|_| AttestationError::NonceExhausted)?;
        Ok(SealedPayload {
            ciphertext,
            nonce,
            tag: tag.into(),
        })
    }

    pub fn unseal(&self, sealed: &SealedPayload, query_id: &str) -> Result<Vec<u8>, AttestationError> {
        let mut plaintext = sealed.ciphertext.clone();
        self.cipher
            .decrypt_in_place_detached(
                Nonce::from_slice(&sealed.nonce),
                query_id.as_bytes(),
                &mut plaintext,
                Tag::from_slice(&sealed.tag),
            )
            .map_err(|_| AttestationError::UnsealingFailed)?;
        Ok(plaintext)
    }
}

pub fn seal(
    plaintext: &[u8],
    session_key: &[u8; 32],
    nonce_counter: u64,
    query_id: &str,
) -> SealedPayload {
    let sealer = Sealer::new(session_key);
    sealer.counter.store(nonce_counter, Ordering::SeqCst);
    sealer
        .seal(plaintext, query_id)
        .expect("fresh sealer has nonce space")
}

pub fn unseal(
    sealed: &SealedPayload,
    session_key: &[u8; 32],
    query_id: &str,
) -> Result<Vec<u8>, AttestationError> {
    Sealer::new(session_key).unseal(sealed, query_id)
}

/// The orchestrator's attested scope: measured manifest, evidence key and
/// the session sealer.
#[derive(Debug)]
pub struct Enclave {
    manifest: PipelineManifest,
    measurement: Measurement,
    signing_key: SigningKey,
    sealer: Sealer,
}

impl Enclave {
    pub fn new(manifest: PipelineManifest, signing_key: SigningKey) -> Result<Self, AttestationError> {
        let measurement = measure(&manifest)?;
        Ok(Self {
            manifest,
            measurement,
            signing_key,
            sealer: Sealer::random(),
        })
    }

    pub fn manifest(&self) -> &PipelineManifest {
        &self.manifest
    }

    pub fn measurement(&self) -> &Measurement {
        &self.measurement
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.signing_key.verifying_key()
    }

    pub fn evidence_for(&self, challenger_nonce: &str) -> Result<AttestationEvidence, AttestationError> {
        issue_evidence(&self.measurement, challenger_nonce, &self.signing_key, now_ms())
    }

    pub fn sealer(&self) -> &Sealer {
        &self.sealer
    }
}

pub fn generate_signing_key() -> SigningKey {
    SigningKey::from_bytes(&rand::random())
}

/// Parses a hex-encoded 32-byte Ed25519 seed.
pub fn signing_key_from_hex(s: &str) -> Result<SigningKey, AttestationError> {
    let bytes: [u8; 32] = hex::decode(s.trim())
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| AttestationError::InvalidKey("expected 32 hex-encoded bytes".into()))?;
    Ok(SigningKey::from_bytes(&bytes))
}
