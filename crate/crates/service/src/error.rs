use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use textcav_embed::EmbedError;

/// An HTTP error with a JSON body `{"error": …, "missing"?: […]}`.
#[derive(Debug, Clone, thiserror::Error)]
#[error("{status}: {message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub missing: Option<Vec<String>>,
}

#[derive(Serialize)]
struct Body<'a> {
    error: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    missing: Option<&'a [String]>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            missing: None,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }

    pub fn with_missing(mut self, missing: Vec<String>) -> Self {
        self.missing = Some(missing);
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Body {
            error: &self.message,
            missing: self.missing.as_deref(),
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<textcav_core::Error> for ApiError {
    fn from(e: textcav_core::Error) -> Self {
        use textcav_core::Error as E;
        match e {
            E::IncompleteAnnotation { ref missing, .. } => {
                let missing = missing.clone();
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()).with_missing(missing)
            }
            E::Io { .. } | E::Json { .. } => Self::internal(e.to_string()),
            _ if e.is_numerical() => Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            _ => Self::bad_request(e.to_string()),
        }
    }
}

impl From<EmbedError> for ApiError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Unavailable { ref missing, .. } => {
                let missing = missing.clone();
                Self::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()).with_missing(missing)
            }
            EmbedError::NoTexts | EmbedError::EmptyText { .. } => Self::bad_request(e.to_string()),
            EmbedError::Contract(_) | EmbedError::Rejected { .. } => Self::new(StatusCode::BAD_GATEWAY, e.to_string()),
            EmbedError::Config(_) | EmbedError::Cache { .. } => Self::internal(e.to_string()),
        }
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
