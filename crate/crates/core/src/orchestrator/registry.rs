use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use tokio::sync::{mpsc, oneshot};

use super::OrchestratorError;
use crate::protocol::{ProviderProducts, RetrievalRequest, RetrievalResponse, SiteSelection};
use crate::vector_store::DataProduct;

/// A retrieval task queued for one provider session.
#[derive(Debug)]
pub struct TaskEnvelope {
    pub task_id: u64,
    pub request: RetrievalRequest,
    pub reply: oneshot::Sender<Result<RetrievalResponse, String>>,
}

#[derive(Debug, Clone)]
pub struct SessionHandle {
    pub session_id: u64,
    pub tasks: mpsc::Sender<TaskEnvelope>,
    pub products: Vec<DataProduct>,
    pub registered_at: u64,
}

#[derive(Debug, Default)]
struct Inner {
    live: BTreeMap<String, SessionHandle>,
    refused: BTreeMap<String, String>,
}

/// Live provider sessions keyed by provider id, plus providers whose last
/// attempt ended with an attestation refusal.
#[derive(Debug, Default)]
pub struct ProviderRegistry {
    inner: RwLock<Inner>,
    next_session: AtomicU64,
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn next_session_id(&self) -> u64 {
        self.next_session.fetch_add(1, Ordering::Relaxed)
    }

    /// Installs a session, replacing any previous session for the same id.
    pub fn insert(&self, provider_id: &str, handle: SessionHandle) {
        let mut inner = self.inner.write().unwrap_or_else(|p| p.into_inner());
        inner.refused.remove(provider_id);
        inner.live.insert(provider_id.to_string(), handle);
    }

    /// Removes the session only if it is still the one identified by `session_id`.
    pub fn remove(&self, provider_id: &str, session_id: u64) -> bool {
        let mut inner = self.inner.write().unwrap_or_else(|p| p.into_inner());
        if inner.live.get(provider_id).map(|h| h.session_id) == Some(session_id) {
            inner.live.remove(provider_id);
            return true;
        }
        false
    }

    pub fn record_refusal(&self, provider_id: &str, reason: &str) {
        let mut inner = self.inner.write().unwrap_or_else(|p| p.into_inner());
        inner
            .refused
            .insert(provider_id.to_string(), reason.to_string());
    }

    pub fn live_ids(&self) -> BTreeSet<String> {
        let inner = self.inner.read().unwrap_or_else(|p| p.into_inner());
        inner
            .live
            .iter()
            .filter(|(_, h)| !h.tasks.is_closed())
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn refusals(&self) -> BTreeMap<String, String> {
        self.inner
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .refused
            .clone()
    }

    pub fn products(&self) -> Vec<ProviderProducts> {
        let inner = self.inner.read().unwrap_or_else(|p| p.into_inner());
        inner
            .live
            .iter()
            .map(|(id, h)| ProviderProducts {
                provider_id: id.clone(),
                products: h.products.clone(),
            })
            .collect()
    }

    /// Snapshot of the sessions chosen by `selection`.
    pub fn select(
        &self,
        selection: &SiteSelection,
    ) -> Result<Vec<(String, SessionHandle)>, OrchestratorError> {
        let inner = self.inner.read().unwrap_or_else(|p| p.into_inner());
        let live: BTreeSet<String> = inner
            .live
            .iter()
            .filter(|(_, h)| !h.tasks.is_closed())
            .map(|(id, _)| id.clone())
            .collect();
        match select_providers(&live, selection) {
            Ok(ids) => Ok(ids
                .into_iter()
                .map(|id| {
                    let h = inner.live[&id].clone();
                    (id, h)
                })
                .collect()),
            Err(e) => {
                let wanted: Vec<&String> = match selection {
                    SiteSelection::All => inner.refused.keys().collect(),
                    SiteSelection::Explicit(ids) => {
                        ids.iter().filter(|id| inner.refused.contains_key(*id)).collect()
                    }
                };
                if wanted.is_empty() {
                    Err(e)
                } else {
                    let detail = wanted
                        .iter()
                        .map(|id| format!("{id}: {}", inner.refused[*id]))
                        .collect::<Vec<_>>()
                        .join(", ");
                    Err(OrchestratorError::AttestationFailed(detail))
                }
            }
        }
    }
}

/// `All` selects every live provider; an explicit list selects its
/// intersection with the live set. An empty result is an error.
pub fn select_providers(
    live: &BTreeSet<String>,
    selection: &SiteSelection,
) -> Result<Vec<String>, OrchestratorError> {
    let chosen: Vec<String> = match selection {
        SiteSelection::All => live.iter().cloned().collect(),
        SiteSelection::Explicit(ids) => {
            let wanted: BTreeSet<&String> = ids.iter().collect();
            live.iter().filter(|id| wanted.contains(id)).cloned().collect()
        }
    };
    if chosen.is_empty() {
        return Err(OrchestratorError::NoProvidersAvailable);
    }
    Ok(chosen)
}
