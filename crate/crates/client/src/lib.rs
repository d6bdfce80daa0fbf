//! Blocking client for the langarm gateway.

pub mod api;

use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use reqwest::blocking::{Client as Http, RequestBuilder};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use api::*;

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:7878";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{status} {}: {}", .body.error, .body.message)]
    Api { status: StatusCode, body: ApiError },
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("bad observation payload: {0}")]
    Observation(String),
    #[error("job {0} still running after {1:?}")]
    Timeout(String, Duration),
}

impl ClientError {
    /// Machine-readable error code for API errors.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { body, .. } => Some(&body.error),
            _ => None,
        }
    }

    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: Http,
}

pub fn decode_png(b64: &str) -> Result<Vec<u8>, ClientError> {
    B64.decode(b64).map_err(|e| ClientError::Observation(e.to_string()))
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: Http::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, ClientError> {
        let resp = req.send()?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json()?);
        }
        let text = resp.text()?;
        let body = serde_json::from_str(&text).unwrap_or(ApiError {
            error: "http".into(),
            message: text,
        });
        Err(ClientError::Api { status, body })
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        self.send(self.http.get(self.url(path)))
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        self.send(self.http.post(self.url(path)).json(body))
    }

    pub fn health(&self) -> Result<serde_json::Value, ClientError> {
        self.get("/v1/health")
    }

    pub fn vocabulary(&self) -> Result<Vec<VocabEntry>, ClientError> {
        self.get("/v1/vocabulary")
    }

    pub fn create_session(&self, req: &CreateSession) -> Result<SessionState, ClientError> {
        self.post("/v1/sessions", req)
    }

    pub fn session(&self, id: &str) -> Result<SessionState, ClientError> {
        self.get(&format!("/v1/sessions/{id}"))
    }

    /// Current observation as PNG bytes.
    pub fn observation(&self, id: &str) -> Result<Vec<u8>, ClientError> {
        let resp = self.http.get(self.url(&format!("/v1/sessions/{id}/observation"))).send()?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.bytes()?.to_vec());
        }
        let body = resp.json::<ApiError>()?;
        Err(ClientError::Api { status, body })
    }

    pub fn supervise(&self, id: &str, text: &str) -> Result<StepReply, ClientError> {
        self.post(&format!("/v1/sessions/{id}/supervise"), &TextRequest { text: text.into() })
    }

    pub fn policy_step(&self, id: &str) -> Result<StepReply, ClientError> {
        self.post(&format!("/v1/sessions/{id}/policy_step"), &serde_json::json!({}))
    }

    pub fn intervene(&self, id: &str, text: &str) -> Result<InterventionReply, ClientError> {
        self.post(&format!("/v1/sessions/{id}/intervention"), &TextRequest { text: text.into() })
    }

    pub fn finish(&self, id: &str, status: Status) -> Result<FinishReply, ClientError> {
        self.post(&format!("/v1/sessions/{id}/finish"), &FinishRequest { status })
    }

    pub fn submit_job(&self, job: &JobRequest) -> Result<JobAccepted, ClientError> {
        self.post("/v1/jobs", job)
    }

    pub fn job(&self, id: &str) -> Result<JobStatus, ClientError> {
        self.get(&format!("/v1/jobs/{id}"))
    }

    /// Polls a job until it leaves the running state.
    pub fn wait_job(&self, id: &str, timeout: Duration) -> Result<JobStatus, ClientError> {
        let start = Instant::now();
        let mut delay = Duration::from_millis(20);
        loop {
            let s = self.job(id)?;
            if s.state != JobState::Running {
                return Ok(s);
            }
            if start.elapsed() > timeout {
                return Err(ClientError::Timeout(id.into(), timeout));
            }
            thread::sleep(delay);
            delay = (delay * 2).min(Duration::from_millis(500));
        }
    }

    /// Submits a job and waits for it.
    pub fn run_job(&self, job: &JobRequest, timeout: Duration) -> Result<JobStatus, ClientError> {
        let accepted = self.submit_job(job)?;
        self.wait_job(&accepted.job_id, timeout)
    }
}
