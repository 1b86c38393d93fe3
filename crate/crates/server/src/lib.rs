//! HTTP+JSON service driving interactive prototype splitting: browse
//! ranked prototypes, label patches, run splits as background jobs and
//! collect assessments into an append-only session log.

pub mod api;
mod error;
mod state;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::routing::{get, post};
use axum::Router;

pub use error::{ApiError, ApiResult};
pub use state::{AppState, ChannelView, Job, JobKind, JobStatus, PatchView, ServerConfig, SplitView};

/// All routes under the `/v1` prefix.
pub fn router(state: Arc<AppState>) -> Router {
    let v1 = Router::new()
        .route("/prototypes", get(api::list_prototypes))
        .route("/detect", post(api::start_detection))
        .route("/prototypes/{id}/patches", get(api::get_patches))
        .route("/prototypes/{id}/judgment", post(api::submit_judgment))
        .route("/prototypes/{id}/labels", post(api::submit_labels))
        .route("/prototypes/{id}/split", post(api::start_split).get(api::get_split))
        .route("/prototypes/{id}/assessment", post(api::submit_assessment))
        .route("/jobs/{id}", get(api::get_job))
        .route("/aggregates", get(api::get_aggregates))
        .route("/sessions/{session}", get(api::get_session))
        .route("/thumbnails/{patch}", get(api::get_thumbnail));
    Router::new().nest("/v1", v1).with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
