//! HTTP service for the collaboration pipeline.
//!
//! Endpoints:
//! - `POST /v1/clients` — register a client profile (idempotent for
//!   identical re-registrations, conflict on changed settings).
//! - `POST /v1/queries` — accept a query; replies `202` with a transcript id
//!   to poll. Refuses when no registered client can serve the query mode or
//!   when the run/queue capacity is exhausted.
//! - `GET /v1/transcripts/{id}` — the finished transcript (canonical JSON,
//!   byte-stable across fetches), or a progress body while running.
//! - `GET /v1/usage` — per-binding token and call totals since start.
//! - `GET /v1/health` — liveness.

mod app;
mod state;

use std::net::SocketAddr;
use std::path::PathBuf;

use colm_core::config::ColmConfig;
use colm_core::store::Store;
use thiserror::Error;

pub use app::build_app;
pub use state::{AppState, RunState, SharedState};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("serve: {0}")]
    Io(#[from] std::io::Error),
}

/// Bind and serve until interrupted (SIGINT) or the process is killed.
pub async fn serve(
    config: ColmConfig,
    data_dir: PathBuf,
    addr: SocketAddr,
) -> Result<(), ServeError> {
    let state = AppState::shared(&config, Store::new(data_dir));
    let app = build_app(state);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })?;
    tracing::info!(address = %listener.local_addr()?, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
