use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

use quarry_core::conductor::ConductorError;
use quarry_core::db::DbError;
use quarry_core::lm::LmError;
use quarry_core::retriever::RetrieverError;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message}))).into_response()
    }
}

fn db_status(e: &DbError) -> StatusCode {
    match e {
        DbError::UnknownWorkspace(_) | DbError::UnknownDataset(_) | DbError::TableNotFound(_) => StatusCode::NOT_FOUND,
        DbError::DuplicateDatasetId(_) | DbError::DuplicateTableId(_) => StatusCode::CONFLICT,
        DbError::InvalidIdentifier(_) | DbError::InvalidPattern(_) | DbError::UnreadableFile { .. } => StatusCode::BAD_REQUEST,
        DbError::TableNotVisible(_) => StatusCode::FORBIDDEN,
        DbError::SqlError(_) => StatusCode::UNPROCESSABLE_ENTITY,
        DbError::Storage(_) | DbError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn lm_status(e: &LmError) -> StatusCode {
    match e {
        LmError::ProviderUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::BAD_GATEWAY,
    }
}

pub(crate) fn from_conductor(e: ConductorError) -> ApiError {
    let status = match &e {
        ConductorError::UnknownSession(_) | ConductorError::NoTransformation => StatusCode::NOT_FOUND,
        ConductorError::Db(d) => db_status(d),
        ConductorError::Lm(l) => lm_status(l),
        ConductorError::ValidationFailed(_) | ConductorError::UnknownView(_) | ConductorError::ViewNotMaterialized(_) => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    ApiError::new(status, e.to_string())
}

impl From<DbError> for ApiError {
    fn from(e: DbError) -> Self {
        Self::new(db_status(&e), e.to_string())
    }
}

impl From<RetrieverError> for ApiError {
    fn from(e: RetrieverError) -> Self {
        let status = match &e {
            RetrieverError::Db(d) => db_status(d),
            RetrieverError::Lm(l) => lm_status(l),
            RetrieverError::InvalidQuery(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}
