//! HTTP JSON service around the multi-token sampler.
//!
//! Routes:
//! - `POST /v1/sessions`, `POST /v1/sessions/{id}/step`, `GET /v1/sessions/{id}/result`,
//!   `DELETE /v1/sessions/{id}` for stepwise inpainting;
//! - `POST /v1/inpaint` for one-shot requests;
//! - `GET /v1/health` and `GET /v1/model`.

pub mod api;
pub mod config;
pub mod error;
mod routes;
pub mod sessions;

use std::path::Path;
use std::sync::Arc;

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use axum::Router;
use put_core::pvqvae::PVqVae;
use put_core::sampler::PutModels;
use put_core::transformer::load_transformer;

pub use config::ServiceConfig;
pub use error::{ApiError, ServiceError};
use sessions::SessionStore;

/// Read-only models plus the session table.
pub struct AppState {
    pub models: PutModels,
    pub sessions: SessionStore,
    pub config: ServiceConfig,
}

impl AppState {
    pub fn new(models: PutModels, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            models,
            sessions: SessionStore::new(config.idle_timeout),
            config,
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/v1/health", get(routes::health))
        .route("/v1/model", get(routes::model))
        .route("/v1/sessions", post(routes::create))
        .route("/v1/sessions/{id}/step", post(routes::step))
        .route("/v1/sessions/{id}/result", get(routes::result))
        .route("/v1/sessions/{id}", axum::routing::delete(routes::delete))
        .route("/v1/inpaint", post(routes::inpaint_once))
        .layer(DefaultBodyLimit::max(limit))
        .layer(axum::middleware::from_fn(routes::log_requests))
        .with_state(state)
}

/// Image P-VQVAE and transformer checkpoints, checked for compatibility.
pub fn load_models(pvqvae: &Path, transformer: &Path) -> Result<PutModels, ServiceError> {
    let image = PVqVae::load(pvqvae)?;
    let (transformer, encoders, _) = load_transformer(transformer)?;
    Ok(PutModels::new(image, transformer, encoders)?)
}
