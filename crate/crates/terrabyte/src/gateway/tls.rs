use std::sync::Arc;

use axum::Router;
use hyper::body::Incoming;
use hyper_util::rt::TokioIo;
use rustls::pki_types::pem::PemObject;
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio_rustls::TlsAcceptor;
use tower::ServiceExt;

use super::auth::{FailureLimiter, RateLimit};
use super::{ConnInfo, GatewayError, TlsConfig};

fn tls_err(e: impl std::fmt::Display) -> GatewayError {
    GatewayError::Tls(e.to_string())
}

/// Builds the TLS acceptor and returns it with the PEM of the leaf
/// certificate.
pub(super) fn acceptor(config: &TlsConfig) -> Result<(TlsAcceptor, String), GatewayError> {
    let (chain, key, pem) = match config {
        TlsConfig::Files { cert_path, key_path } => {
            let pem = std::fs::read_to_string(cert_path)
                .map_err(|e| tls_err(format!("{}: {e}", cert_path.display())))?;
            let chain = CertificateDer::pem_slice_iter(pem.as_bytes()).collect::<Result<Vec<_>, _>>().map_err(tls_err)?;
            if chain.is_empty() {
                return Err(tls_err(format!("{}: no certificates", cert_path.display())));
            }
            let key = PrivateKeyDer::from_pem_file(key_path).map_err(|e| tls_err(format!("{}: {e}", key_path.display())))?;
            (chain, key, pem)
        }
        TlsConfig::SelfSigned { hostnames, write_cert_to } => {
            let certified = rcgen::generate_simple_self_signed(hostnames.clone()).map_err(tls_err)?;
            let pem = certified.cert.pem();
            if let Some(path) = write_cert_to {
                std::fs::write(path, &pem).map_err(|e| tls_err(format!("{}: {e}", path.display())))?;
            }
            let key = PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(certified.key_pair.serialize_der()));
            (vec![certified.cert.der().clone()], key, pem)
        }
    };
    let provider = Arc::new(rustls::crypto::aws_lc_rs::default_provider());
    let mut server = rustls::ServerConfig::builder_with_provider(provider)
        .with_safe_default_protocol_versions()
        .map_err(tls_err)?
        .with_no_client_auth()
        .with_single_cert(chain, key)
        .map_err(tls_err)?;
    server.alpn_protocols = vec![b"http/1.1".to_vec()];
    Ok((TlsAcceptor::from(Arc::new(server)), pem))
}

/// Accepts TLS connections until `shutdown` fires.
pub(super) async fn serve(
    listener: TcpListener,
    acceptor: TlsAcceptor,
    app: Router,
    rate_limit: RateLimit,
    mut shutdown: oneshot::Receiver<()>,
) {
    loop {
        let (tcp, peer) = tokio::select! {
            _ = &mut shutdown => return,
            accepted = listener.accept() => match accepted {
                Ok(a) => a,
                Err(e) => {
                    tracing::warn!("accept failed: {e}");
                    continue;
                }
            },
        };
        let _ = tcp.set_nodelay(true);
        let acceptor = acceptor.clone();
        let app = app.clone();
        tokio::spawn(async move {
            let stream = match acceptor.accept(tcp).await {
                Ok(s) => s,
                Err(e) => {
                    tracing::debug!(%peer, "tls handshake failed: {e}");
                    return;
                }
            };
            let conn = ConnInfo { failures: Arc::new(FailureLimiter::new(rate_limit)) };
            let service = hyper::service::service_fn(move |mut req: hyper::Request<Incoming>| {
                req.extensions_mut().insert(conn.clone());
                app.clone().oneshot(req)
            });
            let builder = hyper::server::conn::http1::Builder::new();
            if let Err(e) = builder.serve_connection(TokioIo::new(stream), service).await {
                tracing::debug!(%peer, "connection ended: {e}");
            }
        });
    }
}
