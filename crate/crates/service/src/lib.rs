//! HTTP API over a directory of TextCAV workspaces.
//!
//! Every subdirectory of the data directory is one workspace in the
//! on-disk layout of [`textcav_core::store::WorkspaceLayout`]. Reads see an
//! immutable snapshot; training runs in the background and publishes a new
//! snapshot atomically when it finishes.

pub mod api;
pub mod error;
pub mod state;

use std::net::SocketAddr;
use std::sync::Arc;

pub use api::router;
pub use error::{ApiError, ApiResult};
pub use state::AppState;

/// Serves `state` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

/// Binds `addr` and serves until the process receives Ctrl-C.
pub async fn run(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("textcav-server listening on http://{}", listener.local_addr()?);
    serve(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
