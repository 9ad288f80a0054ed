//! Shared plumbing for external model backends: error type, retry policy and
//! a small blocking JSON-over-HTTP client.

use serde::de::DeserializeOwned;
use serde::Serialize;
use std::thread;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend timed out")]
    Timeout,
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("no fixture entry for {0}")]
    FixtureMiss(String),
}

impl BackendError {
    /// Transport failures, timeouts, throttling and 5xx answers may succeed
    /// on a second attempt; everything else is permanent.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Unreachable(_) | BackendError::Timeout => true,
            BackendError::Http { status, .. } => *status == 429 || *status >= 500,
            BackendError::Protocol(_) | BackendError::FixtureMiss(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(attempts: u32) -> Self {
        Self {
            attempts,
            base_delay: Duration::ZERO,
        }
    }

    /// Runs `op` until it succeeds, fails permanently, or attempts run out.
    /// Delay doubles after each retryable failure. Returns the result along
    /// with the number of attempts made.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> (Result<T, BackendError>, u32) {
        let attempts = self.attempts.max(1);
        let mut delay = self.base_delay;
        let mut n = 0;
        loop {
            n += 1;
            match op() {
                Ok(v) => return (Ok(v), n),
                Err(e) if e.is_retryable() && n < attempts => {
                    log::debug!("attempt {n} failed ({e}); retrying in {delay:?}");
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                    delay = delay.saturating_mul(2);
                }
                Err(e) => return (Err(e), n),
            }
        }
    }
}

/// Blocking JSON POST client shared by the HTTP backends.
#[derive(Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    bearer: Option<String>,
}

impl std::fmt::Debug for JsonClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JsonClient")
            .field("bearer", &self.bearer.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl JsonClient {
    pub fn new(timeout: Duration, bearer: Option<String>) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self { agent, bearer }
    }

    pub fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        url: &str,
        body: &B,
    ) -> Result<R, BackendError> {
        let mut req = self.agent.post(url);
        if let Some(token) = &self.bearer {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let body = serde_json::to_value(body).map_err(|e| BackendError::Protocol(e.to_string()))?;
        match req.send_json(body) {
            Ok(resp) => resp
                .into_json::<R>()
                .map_err(|e| BackendError::Protocol(e.to_string())),
            Err(ureq::Error::Status(status, resp)) => Err(BackendError::Http {
                status,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                if msg.contains("timed out") || msg.contains("Timeout") {
                    Err(BackendError::Timeout)
                } else {
                    Err(BackendError::Unreachable(msg))
                }
            }
        }
    }
}
