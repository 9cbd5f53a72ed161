//! HTTP facade for the cue workbench: script storage, editing sessions and
//! scored candidate generation under `/v1`.
//!
//! Every error response is `{"error": name, "detail": text}`.

pub mod api;
pub mod candidates;
pub mod state;
pub mod store;

use std::net::SocketAddr;
use std::sync::Arc;

pub use api::{router, ApiError, GenerationRequest, MAX_CANDIDATES};
pub use state::{AppState, LoadError, Models, ServiceConfig};
pub use store::Store;

/// Serve until the process is stopped.
pub async fn serve(config: &ServiceConfig, addr: SocketAddr) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let state = Arc::new(AppState::open(config)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
