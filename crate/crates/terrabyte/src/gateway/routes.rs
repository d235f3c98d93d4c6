use std::pin::Pin;
use std::sync::Arc;
use std::task::{Context, Poll};
use std::time::Instant;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::Next;
use axum::response::{IntoResponse, Response};
use axum::{Extension, Json};
use futures_util::Stream;
use serde::{Deserialize, Serialize};
use terrabyte_core::{PartFile, PartState, Query, QuerySummary};
use tokio_util::io::ReaderStream;

use super::auth::AuthFailure;
use super::error::{ApiError, ErrorCode};
use super::{AppState, ConnInfo};
use crate::archive::ArchiveWriter;
use crate::jobengine::{EngineError, JobEngine, JobTicket};

/// The authenticated caller.
#[derive(Debug, Clone)]
pub struct User(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartStatus {
    pub ready: bool,
    pub state: PartState,
}

const STREAM_CHUNK: usize = 256 * 1024;

pub async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

pub async fn require_user(
    State(state): State<Arc<AppState>>,
    conn: Option<Extension<ConnInfo>>,
    mut req: Request,
    next: Next,
) -> Response {
    let header = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).map(str::to_owned);
    let arrived = Instant::now();
    let users = state.clone();
    let outcome = tokio::task::spawn_blocking(move || users.users.authenticate(header.as_deref()))
        .await
        .unwrap_or(Err(AuthFailure::Bad));
    match outcome {
        Ok(user) => {
            req.extensions_mut().insert(User(user));
            next.run(req).await
        }
        Err(AuthFailure::Missing) => {
            ApiError::new(ErrorCode::MissingCredentials, "credentials required").into_response()
        }
        Err(AuthFailure::Bad) => {
            if let Some(Extension(conn)) = conn {
                let wait = conn.failures.on_failure(arrived);
                let elapsed = arrived.elapsed();
                if wait > elapsed {
                    tokio::time::sleep(wait - elapsed).await;
                }
            }
            tracing::info!("rejected credentials");
            ApiError::new(ErrorCode::BadCredentials, "unknown user or wrong password").into_response()
        }
    }
}

/// Adds CORS headers for the one configured origin and answers preflight
/// requests before authentication.
pub async fn cors(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let Some(allowed) = state.allowed_origin.as_deref() else { return next.run(req).await };
    let origin_ok = req.headers().get(header::ORIGIN).and_then(|v| v.to_str().ok()) == Some(allowed);
    let preflight = req.method() == Method::OPTIONS;
    let mut resp = if preflight && origin_ok { StatusCode::NO_CONTENT.into_response() } else { next.run(req).await };
    if origin_ok {
        let h = resp.headers_mut();
        if let Ok(v) = HeaderValue::from_str(allowed) {
            h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, v);
        }
        h.insert(header::ACCESS_CONTROL_ALLOW_HEADERS, HeaderValue::from_static("authorization, content-type"));
        h.insert(header::ACCESS_CONTROL_ALLOW_METHODS, HeaderValue::from_static("GET, POST, OPTIONS"));
        h.insert(header::ACCESS_CONTROL_EXPOSE_HEADERS, HeaderValue::from_static("content-length, content-disposition"));
        h.insert(header::VARY, HeaderValue::from_static("origin"));
    }
    resp
}

fn parse_query(body: &[u8]) -> Result<Query, ApiError> {
    let v: serde_json::Value = serde_json::from_slice(body).map_err(ApiError::malformed)?;
    if !v.is_object() {
        return Err(ApiError::malformed("query must be a JSON object"));
    }
    let q: Query = serde_json::from_value(v).map_err(ApiError::malformed)?;
    q.validate().map_err(ApiError::malformed)?;
    Ok(q)
}

fn parse_filter(body: &[u8]) -> Result<Query, ApiError> {
    let q = parse_query(body)?;
    if q.precompiled_id.is_some() {
        return Err(ApiError::malformed("precompiled datasets are fetched from /precompiled/{id}"));
    }
    Ok(q)
}

pub async fn check(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<QuerySummary>, ApiError> {
    let q = parse_query(&body)?;
    if let Some(id) = &q.precompiled_id {
        let (info, _) = state
            .precompiled
            .get(id)
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownDataset, format!("no precompiled dataset {id:?}")))?;
        return Ok(Json(QuerySummary { file_count: info.file_count, part_count: 1, total_bytes: info.bytes }));
    }
    let summary = state.catalog.summarize(&q, &state.partition).map_err(ApiError::malformed)?;
    Ok(Json(summary))
}

fn tar_response(body: Body, len: u64, filename: &str) -> Response {
    let mut resp = Response::new(body);
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/x-tar"));
    h.insert(header::CONTENT_LENGTH, HeaderValue::from(len));
    if let Ok(v) = HeaderValue::from_str(&format!("attachment; filename=\"{filename}\"")) {
        h.insert(header::CONTENT_DISPOSITION, v);
    }
    resp
}

pub async fn sample(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let q = parse_filter(&body)?;
    let seed: u64 = rand::random();
    let build_state = state.clone();
    let archive = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, ApiError> {
        let state = build_state;
        let picked = state.catalog.sample_matches(&q, state.sample_size, seed).map_err(ApiError::malformed)?;
        if picked.is_empty() {
            return Err(ApiError::new(ErrorCode::EmptyResult, "the query matched no files"));
        }
        let mut w = ArchiveWriter::new(Vec::new());
        for r in picked {
            let data = state.store.get(&r.blob_key).map_err(ApiError::internal)?;
            w.append(&r.archive_name(), &data).map_err(ApiError::internal)?;
            if r.filetype.is_image() {
                let sidecar = serde_json::to_vec_pretty(r).map_err(ApiError::internal)?;
                w.append(&format!("{}.json", r.record_id), &sidecar).map_err(ApiError::internal)?;
            }
        }
        w.finish().map_err(ApiError::internal)
    })
    .await
    .map_err(ApiError::internal)??;
    let len = archive.len() as u64;
    Ok(tar_response(Body::from(archive), len, "sample.tar"))
}

pub async fn create_job(
    State(state): State<Arc<AppState>>,
    Extension(User(user)): Extension<User>,
    body: Bytes,
) -> Result<(StatusCode, Json<JobTicket>), ApiError> {
    let q = parse_filter(&body)?;
    let files: Vec<PartFile> =
        state.catalog.list_matches(&q).map_err(ApiError::malformed)?.into_iter().map(PartFile::from).collect();
    let ticket = state.engine.create_job(&user, files)?;
    tracing::info!(job = %ticket.job_id, parts = ticket.part_count, user = %user, "job created");
    Ok((StatusCode::CREATED, Json(ticket)))
}

fn owned_part(state: &AppState, user: &str, job_id: &str, index: &str) -> Result<usize, ApiError> {
    let owner = state.engine.job_owner(job_id)?;
    if owner != user {
        return Err(ApiError::new(ErrorCode::NotOwner, "job belongs to another user"));
    }
    index
        .parse::<usize>()
        .map_err(|_| ApiError::new(ErrorCode::UnknownPart, format!("no part {index:?}")))
}

pub async fn part_status(
    State(state): State<Arc<AppState>>,
    Extension(User(user)): Extension<User>,
    Path((job_id, index)): Path<(String, String)>,
) -> Result<Json<PartStatus>, ApiError> {
    let index = owned_part(&state, &user, &job_id, &index)?;
    match state.engine.part_status(&job_id, index)? {
        PartState::Served | PartState::Deleted => Err(EngineError::Gone.into()),
        PartState::Failed => {
            let reason = state.engine.parts(&job_id)?[index].failure.clone().unwrap_or_default();
            Err(EngineError::PartFailed(reason).into())
        }
        s => Ok(Json(PartStatus { ready: s == PartState::Ready, state: s })),
    }
}

/// Streams a ready archive and marks the part served once the last byte
/// has been handed to the connection. A body dropped early (client gone)
/// leaves the part ready.
struct ServeStream {
    inner: ReaderStream<tokio::fs::File>,
    engine: JobEngine,
    job_id: String,
    index: usize,
    sent: u64,
    len: u64,
}

impl Stream for ServeStream {
    type Item = std::io::Result<Bytes>;

    fn poll_next(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Option<Self::Item>> {
        let this = &mut *self;
        match Pin::new(&mut this.inner).poll_next(cx) {
            Poll::Ready(Some(Ok(chunk))) => {
                this.sent += chunk.len() as u64;
                if this.sent == this.len {
                    if let Err(e) = this.engine.complete_serve(&this.job_id, this.index) {
                        tracing::warn!(job = %this.job_id, part = this.index, "could not complete serve: {e}");
                    }
                }
                Poll::Ready(Some(Ok(chunk)))
            }
            other => other,
        }
    }
}

pub async fn part_fetch(
    State(state): State<Arc<AppState>>,
    Extension(User(user)): Extension<User>,
    Path((job_id, index)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let index = owned_part(&state, &user, &job_id, &index)?;
    let part = state.engine.open_part(&job_id, index)?;
    let stream = ServeStream {
        inner: ReaderStream::with_capacity(tokio::fs::File::from_std(part.file), STREAM_CHUNK),
        engine: state.engine.clone(),
        job_id: job_id.clone(),
        index,
        sent: 0,
        len: part.len,
    };
    Ok(tar_response(Body::from_stream(stream), part.len, &format!("{job_id}-part-{index:05}.tar")))
}

pub async fn precompiled_list(State(state): State<Arc<AppState>>) -> Json<Vec<super::PrecompiledInfo>> {
    Json(state.precompiled.list())
}

pub async fn precompiled_fetch(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let (info, path) = state
        .precompiled
        .get(&id)
        .ok_or_else(|| ApiError::new(ErrorCode::UnknownDataset, format!("no precompiled dataset {id:?}")))?;
    let file = tokio::fs::File::open(path).await.map_err(ApiError::internal)?;
    let len = file.metadata().await.map_err(ApiError::internal)?.len();
    let body = Body::from_stream(ReaderStream::with_capacity(file, STREAM_CHUNK));
    Ok(tar_response(body, len, &format!("{}.tar", info.id)))
}

fn content_type_for(path: &str) -> &'static str {
    match path.rsplit('.').next().unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        _ => "application/octet-stream",
    }
}

pub async fn ui_asset(State(state): State<Arc<AppState>>, path: Option<Path<String>>) -> Response {
    let Some(root) = state.ui_dir.as_deref() else { return StatusCode::NOT_FOUND.into_response() };
    let rel = path.map(|Path(p)| p).filter(|p| !p.is_empty()).unwrap_or_else(|| "index.html".into());
    let safe = rel.split('/').all(|seg| !seg.is_empty() && seg != "." && seg != ".." && !seg.contains('\\'));
    if !safe {
        return ApiError::new(ErrorCode::NotFound, "no such asset").into_response();
    }
    match tokio::fs::read(root.join(&rel)).await {
        Ok(bytes) => {
            let mut headers = HeaderMap::new();
            headers.insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type_for(&rel)));
            (headers, bytes).into_response()
        }
        Err(_) => ApiError::new(ErrorCode::NotFound, "no such asset").into_response(),
    }
}

pub async fn not_found() -> ApiError {
    ApiError::new(ErrorCode::NotFound, "no such endpoint")
}
