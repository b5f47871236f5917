//! Answer records and the orchestrator's persisted audit trail. Neither ever
//! carries chunk text: only ids, digests and provider provenance.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::protocol::Strategy;
use crate::vector_store::DataProduct;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderFailure {
    pub provider_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub retrieval_ms: u64,
    pub aggregation_ms: u64,
    pub inference_ms: u64,
    pub total_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub query_id: String,
    pub answer_text: String,
    pub strategy: Strategy,
    pub measurement: String,
    pub candidate_count: usize,
    pub context_ids: Vec<String>,
    pub context_digests: Vec<String>,
    pub participating_providers: Vec<String>,
    pub failed_providers: Vec<ProviderFailure>,
    pub timing: Timing,
}

#[derive(Debug, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent<'a> {
    Registered {
        provider_id: &'a str,
        products: &'a [DataProduct],
    },
    AttestationRefused {
        provider_id: &'a str,
        reason: &'a str,
    },
    Disconnected {
        provider_id: &'a str,
    },
    Answer {
        record: &'a AnswerRecord,
    },
    QueryFailed {
        query_id: &'a str,
        code: &'a str,
    },
}

/// Append-only JSON-lines audit log.
#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl AuditLog {
    pub const FILE_NAME: &'static str = "audit.jsonl";

    pub fn open(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(Self::FILE_NAME);
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&self, event: &AuditEvent<'_>) {
        let mut line = match serde_json::to_vec(event) {
            Ok(l) => l,
            Err(e) => {
                tracing::warn!(error = %e, "audit serialization failed");
                return;
            }
        };
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = f.write_all(&line).and_then(|_| f.flush()) {
            tracing::warn!(error = %e, path = %self.path.display(), "audit write failed");
        }
    }
}
