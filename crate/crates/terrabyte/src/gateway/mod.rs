//! HTTPS API over the catalog, job engine and object store.
//!
//! All endpoints live under `/api/v1` and, apart from `/health`, require
//! HTTP Basic credentials on every request.

pub mod auth;
pub mod config;
pub mod error;
pub mod precompiled;
pub mod routes;
mod tls;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use axum::Router;
use terrabyte_core::{Catalog, PartitionPolicy};
use tokio::sync::oneshot;

pub use self::auth::{PasswordHash, RateLimit, UserEntry, UserStore};
pub use self::config::{GatewayConfig, PrecompiledEntry, TlsConfig};
pub use self::error::{ApiError, ErrorBody, ErrorCode};
pub use self::precompiled::{build_precompiled, PrecompiledInfo, PrecompiledRegistry};
pub use self::routes::PartStatus;
use crate::jobengine::{EngineConfig, JobEngine};
use crate::objectstore::{LocalDirStore, ObjectStore};
use crate::snapshot::{load_catalog, SnapshotError};

/// Largest accepted request body.
pub const MAX_BODY_BYTES: usize = 64 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("config: {0}")]
    Config(String),
    #[error("catalog snapshot: {0}")]
    Snapshot(#[from] SnapshotError),
    #[error("tls: {0}")]
    Tls(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-connection data handed to every request on that connection.
#[derive(Clone)]
pub struct ConnInfo {
    pub failures: Arc<auth::FailureLimiter>,
}

pub struct AppState {
    pub catalog: Arc<Catalog>,
    pub store: Arc<dyn ObjectStore>,
    pub engine: JobEngine,
    pub users: UserStore,
    pub precompiled: PrecompiledRegistry,
    pub partition: PartitionPolicy,
    pub sample_size: usize,
    pub rate_limit: RateLimit,
    pub allowed_origin: Option<String>,
    pub ui_dir: Option<PathBuf>,
}

impl AppState {
    /// Loads the catalog snapshot, opens the store and starts the job
    /// engine described by `config`.
    pub fn from_config(config: &GatewayConfig) -> Result<Arc<Self>, GatewayError> {
        config.validate()?;
        let catalog = Arc::new(load_catalog(&config.catalog_snapshot)?);
        let store: Arc<dyn ObjectStore> = Arc::new(LocalDirStore::open(&config.store_root, config.latency)?);
        Self::with_parts(config, catalog, store)
    }

    /// Like [`AppState::from_config`] but with an already loaded catalog
    /// and store.
    pub fn with_parts(
        config: &GatewayConfig,
        catalog: Arc<Catalog>,
        store: Arc<dyn ObjectStore>,
    ) -> Result<Arc<Self>, GatewayError> {
        let engine = JobEngine::new(
            EngineConfig {
                staging_dir: config.staging_dir.clone(),
                staging_budget: config.staging_budget,
                partition: config.partition,
                max_live_jobs: config.max_live_jobs,
                job_ttl: Duration::from_secs(config.job_ttl_secs),
            },
            store.clone(),
        )?;
        Ok(Arc::new(AppState {
            catalog,
            store,
            engine,
            users: UserStore::new(&config.users).map_err(|e| GatewayError::Config(e.to_string()))?,
            precompiled: PrecompiledRegistry::load(&config.precompiled)?,
            partition: config.partition,
            sample_size: config.sample_size,
            rate_limit: config.rate_limit,
            allowed_origin: config.allowed_origin.clone(),
            ui_dir: config.ui_dir.clone(),
        }))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let authed = Router::new()
        .route("/check", post(routes::check))
        .route("/sample", post(routes::sample))
        .route("/jobs", post(routes::create_job))
        .route("/jobs/{job_id}/parts/{index}/status", get(routes::part_status))
        .route("/jobs/{job_id}/parts/{index}", get(routes::part_fetch))
        .route("/precompiled", get(routes::precompiled_list))
        .route("/precompiled/{id}", get(routes::precompiled_fetch))
        .route_layer(axum::middleware::from_fn_with_state(state.clone(), routes::require_user));
    let api = Router::new().route("/health", get(routes::health)).merge(authed).fallback(routes::not_found);
    Router::new()
        .nest("/api/v1", api)
        .route("/ui", get(routes::ui_asset))
        .route("/ui/", get(routes::ui_asset))
        .route("/ui/{*path}", get(routes::ui_asset))
        .layer(axum::middleware::from_fn_with_state(state.clone(), routes::cors))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// A gateway serving on its own runtime thread. Dropping it stops the
/// server.
pub struct RunningGateway {
    addr: SocketAddr,
    cert_pem: String,
    state: Arc<AppState>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl RunningGateway {
    pub fn start(config: &GatewayConfig) -> Result<Self, GatewayError> {
        let state = AppState::from_config(config)?;
        Self::start_with(state, config.listen, &config.tls)
    }

    pub fn start_with(state: Arc<AppState>, listen: SocketAddr, tls: &TlsConfig) -> Result<Self, GatewayError> {
        let (acceptor, cert_pem) = tls::acceptor(tls)?;
        let listener = std::net::TcpListener::bind(listen)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel();
        let app = router(state.clone());
        let rate_limit = state.rate_limit;
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().thread_name("gateway").build()?;
        let thread = std::thread::Builder::new().name("gateway-main".into()).spawn(move || {
            runtime.block_on(async move {
                match tokio::net::TcpListener::from_std(listener) {
                    Ok(listener) => tls::serve(listener, acceptor, app, rate_limit, rx).await,
                    Err(e) => tracing::error!("listener: {e}"),
                }
            });
            runtime.shutdown_timeout(Duration::from_secs(1));
        })?;
        tracing::info!(%addr, "gateway listening");
        Ok(RunningGateway { addr, cert_pem, state, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL using the loopback address the certificate names.
    pub fn url(&self) -> String {
        format!("https://127.0.0.1:{}", self.addr.port())
    }

    /// PEM of the served leaf certificate, for clients that pin it.
    pub fn cert_pem(&self) -> &str {
        &self.cert_pem
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    /// Blocks until the server thread exits.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for RunningGateway {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
