#![allow(dead_code)]

use std::sync::{Arc, Mutex};
use std::time::Duration;

use cfedrag::attestation::{generate_signing_key, AttestationPolicy};
use cfedrag::embedding::HashedEmbedder;
use cfedrag::inference::{default_template, generate_extractive, InferenceBackend, InferenceError};
use cfedrag::orchestrator::{Orchestrator, OrchestratorSettings, OverlapScorer};
use cfedrag::protocol::{Chunk, FederationConfig};
use cfedrag::provider::ProviderRuntime;
use cfedrag::vector_store::VectorIndex;

pub fn settings(federation: FederationConfig) -> OrchestratorSettings {
    OrchestratorSettings {
        federation,
        template: default_template(),
        embedder_ids: vec!["hashed-v1".into()],
        scorer: Arc::new(OverlapScorer::default()),
        backend: Arc::new(cfedrag::inference::ExtractiveBackend),
        signing_key: generate_signing_key(),
        audit_dir: None,
        poll_timeout: Duration::from_secs(30),
    }
}

pub fn policy_for(orchestrator: &Orchestrator) -> AttestationPolicy {
    AttestationPolicy::new([orchestrator.measurement().clone()], &orchestrator.verifying_key()).unwrap()
}

pub fn index(provider: &str, product: &str, texts: &[String]) -> VectorIndex {
    let chunks = texts
        .iter()
        .enumerate()
        .map(|(i, t)| Chunk::new(provider, product, &i.to_string(), t.as_str()).unwrap())
        .collect();
    VectorIndex::ingest(product, chunks, &HashedEmbedder::default()).unwrap()
}

pub fn runtime(provider: &str, policy: AttestationPolicy, products: &[(&str, Vec<String>)]) -> ProviderRuntime {
    let mut rt = ProviderRuntime::new(provider, policy);
    for (name, texts) in products {
        rt.add_product(index(provider, name, texts), Arc::new(HashedEmbedder::default()))
            .unwrap();
    }
    rt
}

/// Extractive backend that also keeps every prompt it was given.
#[derive(Default)]
pub struct RecordingBackend {
    pub prompts: Mutex<Vec<String>>,
}

impl InferenceBackend for RecordingBackend {
    fn backend_id(&self) -> &str {
        "extractive-v1"
    }

    fn generate(&self, prompt: &str) -> Result<String, InferenceError> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        Ok(generate_extractive(prompt))
    }
}

pub fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix} filler note {i}")).collect()
}
