use std::error::Error as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use reqwest::blocking::{Client as HttpClient, Response};
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use terrabyte_core::{Query, QueryError, QuerySummary};

use super::config::{ClientConfig, TlsTrust};
use super::transfer::extract_atomically;
use crate::archive::ExtractError;
use crate::gateway::{ErrorBody, PartStatus, PrecompiledInfo};
use crate::jobengine::JobTicket;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("connection failed: {0}")]
    ConnectionFailed(String),
    #[error("tls error: {0}")]
    Tls(String),
    #[error("{message} ({code}, HTTP {status})")]
    Api { status: u16, code: String, message: String },
    #[error("server error (HTTP {status}): {body}")]
    ServerError { status: u16, code: Option<String>, body: String },
    #[error("the query matched no files")]
    EmptyResult,
    #[error("invalid query: {0}")]
    InvalidQuery(#[from] QueryError),
    #[error("could not decode server response: {0}")]
    Decode(String),
    #[error(transparent)]
    Extraction(#[from] ExtractError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Config(String),
}

impl ClientError {
    /// True for failures to talk to the server at all, as opposed to an
    /// answer the server gave.
    pub fn is_transport(&self) -> bool {
        matches!(self, ClientError::ConnectionFailed(_) | ClientError::Tls(_))
    }

    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { code, .. } => Some(code),
            ClientError::ServerError { code, .. } => code.as_deref(),
            ClientError::EmptyResult => Some("empty_result"),
            _ => None,
        }
    }
}

/// Finds a rustls error anywhere below `e`, looking inside io errors too.
fn find_tls<'a>(e: &'a (dyn std::error::Error + 'static)) -> Option<&'a rustls::Error> {
    if let Some(tls) = e.downcast_ref::<rustls::Error>() {
        return Some(tls);
    }
    if let Some(inner) = e.downcast_ref::<io::Error>().and_then(|io| io.get_ref()) {
        if let Some(tls) = find_tls(inner) {
            return Some(tls);
        }
    }
    e.source().and_then(find_tls)
}

fn classify(e: reqwest::Error) -> ClientError {
    if let Some(tls) = find_tls(&e) {
        return ClientError::Tls(tls.to_string());
    }
    let mut msg = e.to_string();
    let mut source = e.source();
    while let Some(s) = source {
        msg.push_str(": ");
        msg.push_str(&s.to_string());
        source = s.source();
    }
    ClientError::ConnectionFailed(msg)
}

/// Blocking API client. Cheap to clone; clones share one connection pool.
#[derive(Clone)]
pub struct Client {
    http: HttpClient,
    base: String,
    username: String,
    password: String,
}

impl Client {
    pub fn new(config: &ClientConfig) -> Result<Self, ClientError> {
        let mut builder = HttpClient::builder().connect_timeout(Duration::from_secs(10)).timeout(None);
        if let TlsTrust::Pem(path) = &config.tls_trust {
            let pem = fs::read(path).map_err(|e| ClientError::Config(format!("{}: {e}", path.display())))?;
            let certs = reqwest::Certificate::from_pem_bundle(&pem)
                .map_err(|e| ClientError::Config(format!("{}: {e}", path.display())))?;
            builder = builder.tls_certs_only(certs);
        }
        let http = builder.build().map_err(|e| ClientError::Config(e.to_string()))?;
        Ok(Client {
            http,
            base: format!("{}/api/v1", config.server_url.trim_end_matches('/')),
            username: config.username.clone(),
            password: config.password.clone(),
        })
    }

    /// Sends one authenticated request and turns error statuses into
    /// [`ClientError`]s. Successful responses are returned unread.
    pub fn send_req<B: Serialize + ?Sized>(
        &self,
        method: Method,
        path: &str,
        body: Option<&B>,
    ) -> Result<Response, ClientError> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if !self.username.is_empty() {
            req = req.basic_auth(&self.username, Some(&self.password));
        }
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().map_err(classify)?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().unwrap_or_default();
        let parsed: Option<ErrorBody> = serde_json::from_str(&text).ok();
        let code = parsed.as_ref().map(|b| serde_json::to_value(b.code).ok().and_then(|v| v.as_str().map(str::to_owned)));
        let code = code.flatten();
        if status.is_server_error() {
            return Err(ClientError::ServerError { status: status.as_u16(), code, body: text });
        }
        if status == StatusCode::NOT_FOUND && code.as_deref() == Some("empty_result") {
            return Err(ClientError::EmptyResult);
        }
        Err(ClientError::Api {
            status: status.as_u16(),
            code: code.unwrap_or_else(|| "unknown".into()),
            message: parsed.map(|b| b.message).unwrap_or(text),
        })
    }

    fn json<T: DeserializeOwned, B: Serialize + ?Sized>(
        &self,
        method: Method,
        path: &str,
        body: Option<&B>,
    ) -> Result<T, ClientError> {
        let resp = self.send_req(method, path, body)?;
        let bytes = resp.bytes().map_err(classify)?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn health(&self) -> Result<(), ClientError> {
        self.send_req::<()>(Method::GET, "/health", None).map(drop)
    }

    /// Counts files, parts and bytes for `q`. Invalid queries are rejected
    /// before anything is sent.
    pub fn check_query(&self, q: &Query) -> Result<QuerySummary, ClientError> {
        q.validate()?;
        self.json(Method::POST, "/check", Some(q))
    }

    pub fn create_job(&self, q: &Query) -> Result<JobTicket, ClientError> {
        q.validate_filter()?;
        self.json(Method::POST, "/jobs", Some(q))
    }

    pub fn part_status(&self, job_id: &str, index: usize) -> Result<PartStatus, ClientError> {
        self.json::<_, ()>(Method::GET, &format!("/jobs/{job_id}/parts/{index}/status"), None)
    }

    pub fn fetch_part(&self, job_id: &str, index: usize) -> Result<Response, ClientError> {
        self.send_req::<()>(Method::GET, &format!("/jobs/{job_id}/parts/{index}"), None)
    }

    /// Downloads a random sample for `q` into a fresh directory under
    /// `sample_dir` and returns the written paths.
    pub fn get_sample(&self, q: &Query, sample_dir: &Path) -> Result<Vec<PathBuf>, ClientError> {
        q.validate_filter()?;
        let resp = self.send_req(Method::POST, "/sample", Some(q))?;
        fs::create_dir_all(sample_dir)?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3f");
        let dest = sample_dir.join(format!("sample-{stamp}"));
        fs::create_dir_all(&dest)?;
        let files = extract_atomically(resp, &dest, ".tbc-sample")?;
        Ok(files.into_iter().map(|f| f.path).collect())
    }

    pub fn precompiled_list(&self) -> Result<Vec<PrecompiledInfo>, ClientError> {
        self.json::<_, ()>(Method::GET, "/precompiled", None)
    }

    /// Fetches a precompiled dataset and unpacks it into `dest`.
    pub fn precompiled_get(&self, id: &str, dest: &Path) -> Result<Vec<PathBuf>, ClientError> {
        let resp = self.send_req::<()>(Method::GET, &format!("/precompiled/{id}"), None)?;
        fs::create_dir_all(dest)?;
        let files = extract_atomically(resp, dest, &format!(".tbc-precompiled-{id}"))?;
        Ok(files.into_iter().map(|f| f.path).collect())
    }
}
