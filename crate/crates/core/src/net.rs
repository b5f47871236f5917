//! TLS endpoints of the orchestrator and the one-shot query client.

use std::sync::Arc;
use std::time::Duration;

use rustls::pki_types::ServerName;
use tokio::net::{TcpListener, TcpStream};
use tokio_rustls::{TlsAcceptor, TlsConnector};

use crate::orchestrator::{AnswerRecord, Orchestrator};
use crate::protocol::{Empty, FrameError, Message, ProviderProducts, QueryRequest};
use crate::tls::common_name;
use crate::transport::Framed;

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

/// Accepts provider connections. The client certificate is mandatory and its
/// common name must equal the provider id claimed in REGISTER.
pub async fn serve_provider_endpoint(
    orchestrator: Arc<Orchestrator>,
    listener: TcpListener,
    tls: Arc<rustls::ServerConfig>,
) -> std::io::Result<()> {
    let acceptor = TlsAcceptor::from(tls);
    loop {
        let (tcp, peer) = listener.accept().await?;
        let acceptor = acceptor.clone();
        let orchestrator = Arc::clone(&orchestrator);
        tokio::spawn(async move {
            let stream = match tokio::time::timeout(HANDSHAKE_TIMEOUT, acceptor.accept(tcp)).await {
                Ok(Ok(s)) => s,
                Ok(Err(e)) => {
                    tracing::warn!(%peer, error = %e, "provider handshake failed");
                    return;
                }
                Err(_) => {
                    tracing::warn!(%peer, "provider handshake timed out");
                    return;
                }
            };
            let cn = stream
                .get_ref()
                .1
                .peer_certificates()
                .and_then(|certs| certs.first())
                .and_then(common_name);
            let Some(cn) = cn else {
                tracing::warn!(%peer, "provider certificate has no common name");
                return;
            };
            orchestrator.serve_provider(Framed::new(stream), Some(cn)).await;
        });
    }
}

/// Accepts client connections (server-authenticated TLS only).
pub async fn serve_client_endpoint(
    orchestrator: Arc<Orchestrator>,
    listener: TcpListener,
    tls: Arc<rustls::ServerConfig>,
) -> std::io::Result<()> {
    let acceptor = TlsAcceptor::from(tls);
    loop {
        let (tcp, peer) = listener.accept().await?;
        let acceptor = acceptor.clone();
        let orchestrator = Arc::clone(&orchestrator);
        tokio::spawn(async move {
            match tokio::time::timeout(HANDSHAKE_TIMEOUT, acceptor.accept(tcp)).await {
                Ok(Ok(stream)) => orchestrator.serve_client(Framed::new(stream)).await,
                Ok(Err(e)) => tracing::warn!(%peer, error = %e, "client handshake failed"),
                Err(_) => tracing::warn!(%peer, "client handshake timed out"),
            }
        });
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach orchestrator at {address}: {reason}")]
    Connect { address: String, reason: String },
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

pub struct QueryClient {
    conn: Framed<tokio_rustls::client::TlsStream<TcpStream>>,
}

impl QueryClient {
    pub async fn connect(
        address: &str,
        server_name: &str,
        tls: Arc<rustls::ClientConfig>,
    ) -> Result<Self, ClientError> {
        let connect_err = |reason: String| ClientError::Connect {
            address: address.to_string(),
            reason,
        };
        let tcp = TcpStream::connect(address)
            .await
            .map_err(|e| connect_err(e.to_string()))?;
        let name = ServerName::try_from(server_name.to_string())
            .map_err(|e| connect_err(format!("server name {server_name}: {e}")))?;
        let stream = TlsConnector::from(tls)
            .connect(name, tcp)
            .await
            .map_err(|e| connect_err(format!("tls handshake: {e}")))?;
        Ok(Self {
            conn: Framed::new(stream),
        })
    }

    pub async fn query(&mut self, text: &str) -> Result<AnswerRecord, ClientError> {
        self.conn
            .send(&Message::Query(QueryRequest { text: text.to_string() }))
            .await?;
        match self.conn.recv().await? {
            Message::Answer(a) => Ok(a.record),
            Message::Error(e) => Err(ClientError::Remote {
                code: e.code,
                message: e.message,
            }),
            other => Err(ClientError::Protocol(format!("unexpected {}", other.type_name()))),
        }
    }

    pub async fn list_products(&mut self) -> Result<Vec<ProviderProducts>, ClientError> {
        self.conn.send(&Message::ListProducts(Empty {})).await?;
        match self.conn.recv().await? {
            Message::Products(p) => Ok(p.providers),
            Message::Error(e) => Err(ClientError::Remote {
                code: e.code,
                message: e.message,
            }),
            other => Err(ClientError::Protocol(format!("unexpected {}", other.type_name()))),
        }
    }
}
