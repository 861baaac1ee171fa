//! Shared error type and retry helpers for external service clients.

use std::fmt;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// How a failed provider call should be treated by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// Transient: rate limits, timeouts, 5xx. Safe to retry.
    Retryable,
    /// Permanent for this request (bad input, 4xx other than auth).
    Fatal,
    /// Credentials missing or rejected. Aborts a batch run.
    Auth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub struct ProviderError {
    pub provider: String,
    pub kind: FailureKind,
    pub message: String,
}

impl fmt::Display for ProviderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            FailureKind::Retryable => "retryable",
            FailureKind::Fatal => "fatal",
            FailureKind::Auth => "auth",
        };
        write!(f, "{} error ({kind}): {}", self.provider, self.message)
    }
}

impl ProviderError {
    pub fn retryable(provider: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            provider: provider.into(),
            kind: FailureKind::Retryable,
            message: message.into(),
        }
    }

    pub fn fatal(provider: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            provider: provider.into(),
            kind: FailureKind::Fatal,
            message: message.into(),
        }
    }

    pub fn auth(provider: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            provider: provider.into(),
            kind: FailureKind::Auth,
            message: message.into(),
        }
    }

    pub fn is_retryable(&self) -> bool {
        self.kind == FailureKind::Retryable
    }

    /// Maps an HTTP status code to an error of the matching kind.
    pub fn from_status(provider: &str, status: u16, body: &str) -> Self {
        let message = format!("HTTP {status}: {}", truncate(body, 300));
        match status {
            401 | 403 => Self::auth(provider, message),
            408 | 425 | 429 | 500..=599 => Self::retryable(provider, message),
            _ => Self::fatal(provider, message),
        }
    }

    /// Classifies a transport-level failure.
    pub fn from_reqwest(provider: &str, err: &reqwest::Error) -> Self {
        if let Some(status) = err.status() {
            return Self::from_status(provider, status.as_u16(), &err.to_string());
        }
        if err.is_timeout() || err.is_connect() || err.is_request() {
            Self::retryable(provider, err.to_string())
        } else {
            Self::fatal(provider, err.to_string())
        }
    }
}

pub(crate) fn truncate(s: &str, max_chars: usize) -> String {
    match s.char_indices().nth(max_chars) {
        Some((idx, _)) => format!("{}...", &s[..idx]),
        None => s.to_string(),
    }
}

/// Exponential backoff schedule for retryable provider errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub const fn none() -> Self {
        Self {
            max_attempts: 1,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }

    /// Runs `op` until it succeeds, fails non-retryably, or attempts run out.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt + 1 < attempts => {
                    let wait = self.delay(attempt);
                    tracing::debug!(provider = %e.provider, ?wait, "retrying after: {}", e.message);
                    if !wait.is_zero() {
                        thread::sleep(wait);
                    }
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Counting semaphore bounding concurrent calls to one provider.
#[derive(Debug)]
pub struct Permits {
    available: std::sync::Mutex<usize>,
    freed: std::sync::Condvar,
}

pub struct PermitGuard<'a> {
    permits: &'a Permits,
}

impl Permits {
    pub fn new(count: usize) -> Self {
        Self {
            available: std::sync::Mutex::new(count.max(1)),
            freed: std::sync::Condvar::new(),
        }
    }

    pub fn acquire(&self) -> PermitGuard<'_> {
        let mut available = self.available.lock().unwrap_or_else(|p| p.into_inner());
        while *available == 0 {
            available = self.freed.wait(available).unwrap_or_else(|p| p.into_inner());
        }
        *available -= 1;
        PermitGuard { permits: self }
    }
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        let mut available = self.permits.available.lock().unwrap_or_else(|p| p.into_inner());
        *available += 1;
        self.permits.freed.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn status_mapping() {
        assert_eq!(ProviderError::from_status("ris", 429, "").kind, FailureKind::Retryable);
        assert_eq!(ProviderError::from_status("ris", 503, "").kind, FailureKind::Retryable);
        assert_eq!(ProviderError::from_status("ris", 401, "").kind, FailureKind::Auth);
        assert_eq!(ProviderError::from_status("ris", 404, "").kind, FailureKind::Fatal);
    }

    #[test]
    fn retry_stops_on_fatal() {
        let calls = AtomicUsize::new(0);
        let policy = RetryPolicy { max_attempts: 5, base_delay_ms: 0, max_delay_ms: 0 };
        let res: Result<(), _> = policy.run(|| {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(ProviderError::fatal("x", "nope"))
        });
        assert!(res.is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn retry_until_success() {
        let calls = AtomicUsize::new(0);
        let policy = RetryPolicy { max_attempts: 5, base_delay_ms: 0, max_delay_ms: 0 };
        let res = policy.run(|| {
            if calls.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(ProviderError::retryable("x", "busy"))
            } else {
                Ok(7)
            }
        });
        assert_eq!(res.unwrap(), 7);
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retry_gives_up() {
        let calls = AtomicUsize::new(0);
        let policy = RetryPolicy { max_attempts: 3, base_delay_ms: 0, max_delay_ms: 0 };
        let res: Result<(), _> = policy.run(|| {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(ProviderError::retryable("x", "busy"))
        });
        assert!(res.unwrap_err().is_retryable());
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn permits_bound_concurrency() {
        let permits = Arc::new(Permits::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let (permits, active, peak) = (permits.clone(), active.clone(), peak.clone());
                s.spawn(move || {
                    let _g = permits.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    active.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
