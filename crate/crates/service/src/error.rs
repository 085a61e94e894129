use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

/// Startup failures.
#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("environment variable {key} has invalid value {value:?}")]
    Env { key: String, value: String },
    #[error("{0} is not set")]
    MissingPath(&'static str),
    #[error(transparent)]
    Model(#[from] put_core::Error),
}

/// JSON error reply: `{"error": {"kind", "message", "field"?}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: String,
    pub message: String,
    pub field: Option<String>,
}

#[derive(Serialize)]
struct Body<'a> {
    error: Detail<'a>,
}

#[derive(Serialize)]
struct Detail<'a> {
    kind: &'a str,
    message: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'a str>,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status,
            kind: kind.into(),
            message: message.into(),
            field: None,
        }
    }

    pub fn bad_request(field: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad-request", message).on(field)
    }

    pub fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not-found", format!("no session {id}"))
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn with_status(mut self, status: StatusCode) -> Self {
        self.status = status;
        self
    }

    pub fn on(mut self, field: &str) -> Self {
        self.field = Some(field.into());
        self
    }

    /// Maps a library error raised while handling `field`.
    pub fn from_core(e: put_core::Error, field: Option<&str>) -> Self {
        use put_core::Error as E;
        let status = match &e {
            E::InvalidMask(_) | E::InvalidCondition(_) => StatusCode::UNPROCESSABLE_ENTITY,
            E::Format(_) | E::SizeMismatch { .. } | E::Config(_) | E::TokenOutOfRange { .. } => {
                StatusCode::BAD_REQUEST
            }
            E::SessionComplete => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            kind: e.kind().into(),
            message: e.to_string(),
            field: field.map(str::to_string),
        }
    }
}

impl From<put_core::Error> for ApiError {
    fn from(e: put_core::Error) -> Self {
        Self::from_core(e, None)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Body {
            error: Detail {
                kind: &self.kind,
                message: &self.message,
                field: self.field.as_deref(),
            },
        };
        (self.status, Json(body)).into_response()
    }
}
