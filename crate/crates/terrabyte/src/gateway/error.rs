use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use crate::jobengine::EngineError;

/// Machine-readable error codes the API can return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    MissingCredentials,
    BadCredentials,
    MalformedQuery,
    EmptyResult,
    TooManyJobs,
    UnknownJob,
    UnknownPart,
    NotOwner,
    PartGone,
    PartFailed,
    NotReady,
    UnknownDataset,
    NotFound,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::MissingCredentials | ErrorCode::BadCredentials => StatusCode::UNAUTHORIZED,
            ErrorCode::MalformedQuery => StatusCode::BAD_REQUEST,
            ErrorCode::EmptyResult
            | ErrorCode::UnknownJob
            | ErrorCode::UnknownPart
            | ErrorCode::UnknownDataset
            | ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::TooManyJobs => StatusCode::TOO_MANY_REQUESTS,
            ErrorCode::NotOwner => StatusCode::FORBIDDEN,
            ErrorCode::PartGone => StatusCode::GONE,
            ErrorCode::NotReady => StatusCode::CONFLICT,
            ErrorCode::PartFailed | ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Body of every error response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError { code, message: message.into() }
    }

    pub fn malformed(message: impl ToString) -> Self {
        ApiError::new(ErrorCode::MalformedQuery, message.to_string())
    }

    pub fn internal(message: impl ToString) -> Self {
        ApiError::new(ErrorCode::Internal, message.to_string())
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let code = match &e {
            EngineError::EmptyQueryResult => ErrorCode::EmptyResult,
            EngineError::TooManyLiveJobs => ErrorCode::TooManyJobs,
            EngineError::UnknownJob => ErrorCode::UnknownJob,
            EngineError::UnknownPart(_) => ErrorCode::UnknownPart,
            EngineError::NotReady(_) => ErrorCode::NotReady,
            EngineError::Gone => ErrorCode::PartGone,
            EngineError::PartFailed(_) => ErrorCode::PartFailed,
            EngineError::Io(_) => ErrorCode::Internal,
        };
        ApiError::new(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.code.status();
        let mut resp = (status, Json(ErrorBody { code: self.code, message: self.message })).into_response();
        if status == StatusCode::UNAUTHORIZED {
            resp.headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Basic realm=\"terrabyte\""));
        }
        resp
    }
}
