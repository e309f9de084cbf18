use std::time::Duration;

use serde_json::Value;

use super::wire::Endpoint;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    /// Transient failure; the request may be retried.
    #[error("unavailable: {0}")]
    Unavailable(String),
    /// The backend refused or could not parse the request.
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("no recorded response for request digest {0}")]
    ReplayMiss(String),
}

impl TransportError {
    pub fn is_transient(&self) -> bool {
        matches!(self, TransportError::Unavailable(_))
    }
}

/// Moves one JSON request to a model endpoint and returns its JSON response.
pub trait Transport: Send + Sync {
    fn call(&self, endpoint: Endpoint, request: &Value) -> Result<Value, TransportError>;
}

impl<F> Transport for F
where
    F: Fn(Endpoint, &Value) -> Result<Value, TransportError> + Send + Sync,
{
    fn call(&self, endpoint: Endpoint, request: &Value) -> Result<Value, TransportError> {
        self(endpoint, request)
    }
}

/// JSON over HTTP POST to `<base_url><endpoint path>`.
pub struct HttpTransport {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }
}

impl Transport for HttpTransport {
    fn call(&self, endpoint: Endpoint, request: &Value) -> Result<Value, TransportError> {
        let url = format!("{}{}", self.base_url, endpoint.path());
        let body = serde_json::to_string(request).map_err(|e| TransportError::Rejected(e.to_string()))?;
        let mut resp = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| TransportError::Unavailable(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Unavailable(format!("{url}: {e}")))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| TransportError::Rejected(format!("{url}: invalid JSON response: {e}"))),
            408 | 429 | 500..=599 => Err(TransportError::Unavailable(format!("{url}: HTTP {status}"))),
            _ => Err(TransportError::Rejected(format!("{url}: HTTP {status}: {text}"))),
        }
    }
}
