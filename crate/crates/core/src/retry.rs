//! Retry with exponential backoff, shared by the chat gateway and the MT client.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Total attempts including the first one.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 500,
            max_delay_ms: 16_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before retry number `retry` (0-based): base * 2^retry, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.min(32)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Errors that may succeed if the call is repeated.
pub trait Retryable {
    fn is_retryable(&self) -> bool;

    /// Server-requested wait, if any, which overrides the computed backoff
    /// when longer.
    fn retry_after(&self) -> Option<Duration> {
        None
    }
}

/// Run `op` until it succeeds, fails with a non-retryable error, or the
/// policy's attempts are used up. Returns the value and the number of
/// attempts made; on failure the last error is returned as-is.
pub fn with_backoff<T, E: Retryable + std::fmt::Display>(
    policy: &RetryPolicy,
    mut op: impl FnMut(u32) -> Result<T, E>,
) -> Result<(T, u32), E> {
    let max = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match op(attempt) {
            Ok(v) => return Ok((v, attempt)),
            Err(e) if !e.is_retryable() || attempt >= max => return Err(e),
            Err(e) => {
                let mut delay = policy.delay(attempt - 1);
                if let Some(after) = e.retry_after() {
                    delay = delay.max(after.min(Duration::from_millis(policy.max_delay_ms)));
                }
                log::debug!("attempt {attempt}/{max} failed: {e}; retrying in {delay:?}");
                if !delay.is_zero() {
                    thread::sleep(delay);
                }
                attempt += 1;
            }
        }
    }
}
