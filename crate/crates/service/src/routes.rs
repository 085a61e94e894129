use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Request, State};
use axum::http::StatusCode;
use axum::middleware::Next;
use axum::response::{IntoResponse, Response};
use axum::Json;
use put_core::rng::stream;
use put_core::sampler::{inpaint, SamplingSession};

use crate::api::{
    png_base64, Cell, CreateResponse, Decoded, Grid, Health, InpaintRequest, InpaintResponse, ModelInfo,
    ResultResponse, StepResponse, TokenGridBody,
};
use crate::error::ApiError;
use crate::sessions::{Lookup, Session};
use crate::AppState;

type Shared = State<Arc<AppState>>;

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    body.map(|Json(v)| v).map_err(|e| {
        let status = if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            StatusCode::PAYLOAD_TOO_LARGE
        } else {
            StatusCode::BAD_REQUEST
        };
        ApiError::new(status, "bad-request", e.body_text())
    })
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn session(state: &AppState, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
    state.sessions.get(id).map_err(|e| match e {
        Lookup::Missing => ApiError::not_found(id),
        Lookup::Expired => ApiError::new(StatusCode::NOT_FOUND, "expired", format!("session {id} expired")),
    })
}

fn lock(session: &Mutex<Session>) -> std::sync::MutexGuard<'_, Session> {
    session.lock().unwrap_or_else(|e| e.into_inner())
}

fn decode(state: &AppState, req: &InpaintRequest) -> Result<Decoded, ApiError> {
    let cfg = state.models.pvqvae.config();
    req.decode(cfg.height, cfg.width, state.models.transformer.config().vocab)
}

pub async fn health(State(state): Shared) -> Json<Health> {
    let _ = &state.models;
    Json(Health {
        status: "ok".into(),
        model_loaded: true,
    })
}

pub async fn model(State(state): Shared) -> Json<ModelInfo> {
    Json(ModelInfo::new(state.models.pvqvae.config(), state.models.with_conditions()))
}

pub async fn create(
    State(state): Shared,
    body: Result<Json<InpaintRequest>, JsonRejection>,
) -> Result<Json<CreateResponse>, ApiError> {
    let req = json_body(body)?;
    blocking(move || {
        let d = decode(&state, &req)?;
        let models = &state.models;
        let features = models
            .condition_features(&d.conditions)
            .map_err(|e| ApiError::from_core(e, Some("conditions")))?;
        let samples = (0..d.config.n_samples)
            .map(|i| {
                SamplingSession::new(models, &d.image, &d.mask, features.clone(), stream(d.config.seed, &[i as u64]))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let masked_cells = samples[0].masked().len();
        let iterations_expected = samples[0].expected_iterations(d.config.k1);
        let (h, w) = models.pvqvae.config().grid();
        let session = Session {
            samples,
            k1: d.config.k1,
            k2: d.config.k2,
            created: Instant::now(),
        };
        let complete = session.is_complete();
        let session_id = state.sessions.insert(session);
        tracing::info!(%session_id, masked_cells, iterations_expected, "session created");
        Ok(Json(CreateResponse {
            session_id,
            grid: Grid { h, w },
            masked_cells,
            iterations_expected,
            complete,
        }))
    })
    .await
}

pub async fn step(State(state): Shared, Path(id): Path<String>) -> Result<Json<StepResponse>, ApiError> {
    let handle = session(&state, &id)?;
    blocking(move || {
        let mut s = lock(&handle);
        if s.is_complete() {
            return Err(ApiError::conflict(format!("session {id} is already complete")));
        }
        let models = &state.models;
        let gw = models.pvqvae.config().grid().1;
        let (k1, k2) = (s.k1, s.k2);
        let mut iteration = 0;
        let mut per_sample = Vec::with_capacity(s.samples.len());
        let mut previews = Vec::with_capacity(s.samples.len());
        for sample in &mut s.samples {
            let out = sample.step(models, k1, k2)?;
            iteration = out.iteration;
            per_sample.push(out.filled.iter().map(|&c| Cell::from_index(c, gw)).collect::<Vec<_>>());
            previews.push(png_base64(&sample.preview(models)?)?);
        }
        Ok(Json(StepResponse {
            iteration,
            filled_cells: per_sample[0].clone(),
            filled_cells_per_sample: per_sample,
            previews,
            complete: s.is_complete(),
        }))
    })
    .await
}

pub async fn result(State(state): Shared, Path(id): Path<String>) -> Result<Json<ResultResponse>, ApiError> {
    let handle = session(&state, &id)?;
    blocking(move || {
        let s = lock(&handle);
        if !s.is_complete() {
            return Err(ApiError::conflict(format!("session {id} has pending cells")));
        }
        let mut images = Vec::with_capacity(s.samples.len());
        let mut tokens = Vec::with_capacity(s.samples.len());
        for sample in &s.samples {
            images.push(png_base64(&sample.finish(&state.models)?)?);
            tokens.push(TokenGridBody::from(sample.grid()));
        }
        Ok(Json(ResultResponse { images, tokens }))
    })
    .await
}

pub async fn delete(State(state): Shared, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    if state.sessions.remove(&id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::not_found(&id))
    }
}

pub async fn inpaint_once(
    State(state): Shared,
    body: Result<Json<InpaintRequest>, JsonRejection>,
) -> Result<Json<InpaintResponse>, ApiError> {
    let req = json_body(body)?;
    blocking(move || {
        let d = decode(&state, &req)?;
        let results = inpaint(
            &state.models,
            &d.image,
            &d.mask,
            &d.conditions,
            &d.config,
            state.config.parallelism,
        )
        .map_err(|e| {
            let field = matches!(e, put_core::Error::InvalidCondition(_)).then_some("conditions");
            ApiError::from_core(e, field)
        })?;
        let iterations = results.first().map_or(0, |r| r.trace.len());
        let mut images = Vec::with_capacity(results.len());
        for r in &results {
            images.push(png_base64(&r.image)?);
        }
        Ok(Json(InpaintResponse {
            images,
            tokens: results.iter().map(|r| TokenGridBody::from(&r.tokens)).collect(),
            iterations,
        }))
    })
    .await
}

/// One structured log line per request.
pub async fn log_requests(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let start = Instant::now();
    let response = next.run(req).await;
    tracing::info!(
        %method,
        %path,
        status = response.status().as_u16(),
        elapsed_ms = start.elapsed().as_secs_f64() * 1e3,
        "request"
    );
    response.into_response()
}
