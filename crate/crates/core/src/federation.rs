//! In-process federation: provider runtimes wired to an orchestrator through
//! the real codec and attestation handshake over in-memory byte pipes.

use std::sync::Arc;
use std::time::Duration;

use tokio::task::JoinHandle;

use crate::orchestrator::Orchestrator;
use crate::provider::{run_session, ProviderError, ProviderRuntime};
use crate::transport::{Framed, WireTap};

const PIPE_CAPACITY: usize = 256 * 1024;
const REGISTRATION_TIMEOUT: Duration = Duration::from_secs(10);

pub struct LoopbackFederation {
    orchestrator: Arc<Orchestrator>,
    tap: Option<WireTap>,
    tasks: Vec<JoinHandle<()>>,
    providers: Vec<JoinHandle<Result<(), ProviderError>>>,
}

impl LoopbackFederation {
    pub fn new(orchestrator: Arc<Orchestrator>) -> Self {
        Self {
            orchestrator,
            tap: None,
            tasks: Vec::new(),
            providers: Vec::new(),
        }
    }

    /// Captures every frame on provider links from now on.
    pub fn with_tap(mut self, tap: WireTap) -> Self {
        self.tap = Some(tap);
        self
    }

    pub fn orchestrator(&self) -> &Arc<Orchestrator> {
        &self.orchestrator
    }

    /// Connects a provider and waits until it is registered or its session
    /// has ended (for instance because it refused the orchestrator's evidence).
    pub async fn connect(&mut self, runtime: Arc<ProviderRuntime>) -> Result<(), ProviderError> {
        let (orch_end, provider_end) = tokio::io::duplex(PIPE_CAPACITY);
        let orch = Arc::clone(&self.orchestrator);
        let mut serving = tokio::spawn(async move {
            orch.serve_provider(Framed::new(orch_end), None).await;
        });
        let id = runtime.provider_id().to_string();
        let mut session = tokio::spawn(run_session(
            Framed::with_tap(provider_end, self.tap.clone()),
            runtime,
        ));

        let watch = Arc::clone(&self.orchestrator);
        let wanted = id.clone();
        let registered = async move {
            loop {
                if watch.registry().live_ids().contains(&wanted) {
                    return;
                }
                tokio::time::sleep(Duration::from_millis(1)).await;
            }
        };
        let outcome = tokio::select! {
            _ = registered => {
                self.providers.push(session);
                Ok(())
            }
            ended = &mut session => {
                // Let the orchestrator side finish so a refusal is on record.
                let _ = tokio::time::timeout(REGISTRATION_TIMEOUT, &mut serving).await;
                match ended {
                    Ok(Ok(())) => Err(ProviderError::Protocol(format!("{id}: session ended before registration"))),
                    Ok(Err(e)) => Err(e),
                    Err(e) => Err(ProviderError::Protocol(e.to_string())),
                }
            }
            _ = tokio::time::sleep(REGISTRATION_TIMEOUT) => {
                session.abort();
                Err(ProviderError::Protocol(format!("{id}: registration timed out")))
            }
        };
        self.tasks.push(serving);
        outcome
    }
}

impl Drop for LoopbackFederation {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
        for p in &self.providers {
            p.abort();
        }
    }
}
