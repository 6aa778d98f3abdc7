//! HTTP client for an external adjudication service.
//!
//! The endpoint receives an [`AssistantRequest`] as JSON on `POST /adjudicate`
//! and answers with an [`AssistantResponse`].

use std::sync::OnceLock;
use std::time::Duration;

use crfcheck_core::detector::{Assistant, AssistantError, AssistantRequest, AssistantResponse};

use crate::config::AssistantEndpoint;

pub struct HttpAssistant {
    endpoint: String,
    timeout: Duration,
    // built on first use: the blocking client must not be created on an
    // async runtime thread
    client: OnceLock<Result<reqwest::blocking::Client, String>>,
}

impl HttpAssistant {
    pub fn new(cfg: &AssistantEndpoint) -> Self {
        HttpAssistant {
            endpoint: format!("{}/adjudicate", cfg.url.trim_end_matches('/')),
            timeout: Duration::from_millis(cfg.timeout_ms),
            client: OnceLock::new(),
        }
    }

    fn client(&self) -> Result<&reqwest::blocking::Client, AssistantError> {
        self.client
            .get_or_init(|| {
                reqwest::blocking::Client::builder()
                    .timeout(self.timeout)
                    .build()
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| AssistantError::Unavailable(e.clone()))
    }
}

impl Assistant for HttpAssistant {
    fn name(&self) -> &str {
        &self.endpoint
    }

    fn adjudicate(&self, request: &AssistantRequest) -> Result<AssistantResponse, AssistantError> {
        let resp = self.client()?.post(&self.endpoint).json(request).send().map_err(|e| {
            if e.is_timeout() {
                AssistantError::Timeout
            } else {
                AssistantError::Unavailable(e.to_string())
            }
        })?;
        if !resp.status().is_success() {
            return Err(AssistantError::Unavailable(format!("status {}", resp.status())));
        }
        let body = resp.text().map_err(|e| {
            if e.is_timeout() {
                AssistantError::Timeout
            } else {
                AssistantError::Unavailable(e.to_string())
            }
        })?;
        serde_json::from_str(&body).map_err(|e| AssistantError::Malformed(e.to_string()))
    }
}
