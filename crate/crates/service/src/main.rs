use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use put_service::{load_models, router, AppState, ServiceConfig, ServiceError};
use tracing_subscriber::EnvFilter;

fn spawn_sweeper(state: Arc<AppState>) {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(30));
        loop {
            tick.tick().await;
            let removed = state.sessions.sweep();
            if removed > 0 {
                tracing::info!(removed, "expired sessions dropped");
            }
        }
    });
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let config = ServiceConfig::from_env()?;
    let pvqvae = config.pvqvae.clone().ok_or(ServiceError::MissingPath("PUT_PVQVAE"))?;
    let transformer = config.transformer.clone().ok_or(ServiceError::MissingPath("PUT_TRANSFORMER"))?;
    let models = load_models(&pvqvae, &transformer).context("loading checkpoints")?;
    let addr = format!("{}:{}", config.addr, config.port);
    let state = AppState::new(models, config);
    spawn_sweeper(state.clone());

    let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state)).await?;
    Ok(())
}
