//! Minimal client for an external text-completion endpoint.
//!
//! Wire contract: `POST <url>` with JSON `{"prompt": ..., "image_png_base64"?: ...}`,
//! reply JSON `{"text": ...}`. Each call gets a 10 s timeout and one retry.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EndpointError {
    #[error("request failed: {0}")]
    Transport(String),
    #[error("endpoint returned status {0}")]
    Status(u16),
    #[error("reply is not the expected JSON object: {0}")]
    Body(String),
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_png_base64: Option<&'a str>,
}

#[derive(Deserialize)]
struct CompletionReply {
    text: String,
}

#[derive(Clone, Debug)]
pub struct ChatEndpoint {
    pub url: String,
    pub timeout: Duration,
    pub retries: usize,
}

impl ChatEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        ChatEndpoint {
            url: url.into(),
            timeout: Duration::from_secs(10),
            retries: 1,
        }
    }

    pub fn complete(&self, prompt: &str, image_png_base64: Option<&str>) -> Result<String, EndpointError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        let body = CompletionRequest {
            prompt,
            image_png_base64,
        };
        let mut last = EndpointError::Transport("no attempt made".into());
        for attempt in 0..=self.retries {
            match self.attempt(&client, &body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    tracing::debug!(attempt, error = %e, url = %self.url, "completion attempt failed");
                    last = e;
                }
            }
        }
        Err(last)
    }

    fn attempt(
        &self,
        client: &reqwest::blocking::Client,
        body: &CompletionRequest<'_>,
    ) -> Result<String, EndpointError> {
        let resp = client
            .post(&self.url)
            .json(body)
            .send()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EndpointError::Status(resp.status().as_u16()));
        }
        let text = resp
            .text()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        let reply: CompletionReply =
            serde_json::from_str(&text).map_err(|e| EndpointError::Body(e.to_string()))?;
        Ok(reply.text)
    }
}
