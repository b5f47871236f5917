//! Confidential federated retrieval-augmented generation.

pub mod attestation;
pub mod bench;
pub mod cli;
pub mod embedding;
pub mod federation;
pub mod inference;
pub mod net;
pub mod orchestrator;
pub mod par;
pub mod protocol;
pub mod provider;
pub mod tls;
pub mod transport;
pub mod vector_store;
