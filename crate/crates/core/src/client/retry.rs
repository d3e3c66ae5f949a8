//! Retry with jittered exponential backoff.

use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ProviderFault;

/// Which fault classes are worth retrying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryClasses {
    pub transport: bool,
    pub rate_limit: bool,
    pub server_error: bool,
}

impl Default for RetryClasses {
    fn default() -> Self {
        Self { transport: true, rate_limit: true, server_error: true }
    }
}

impl RetryClasses {
    pub fn permits(&self, fault: &ProviderFault) -> bool {
        match fault {
            ProviderFault::Transport(_) => self.transport,
            ProviderFault::Status { code: 429, .. } => self.rate_limit,
            ProviderFault::Status { code, .. } if (500..600).contains(code) => self.server_error,
            ProviderFault::Status { .. } => false,
        }
    }
}

/// Backoff schedule. Total attempts never exceed `max_retries + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub multiplier: f64,
    /// Jitter fraction: each delay is scaled by a uniform factor in
    /// `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    pub max_delay_ms: u64,
    pub retryable: RetryClasses,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 20,
            base_delay_ms: 500,
            multiplier: 2.0,
            jitter: 0.1,
            max_delay_ms: 30_000,
            retryable: RetryClasses::default(),
        }
    }
}

impl RetryPolicy {
    /// Default retry budget with zero backoff. For tests and scripted runs.
    pub fn immediate() -> Self {
        Self { base_delay_ms: 0, max_delay_ms: 0, jitter: 0.0, ..Self::default() }
    }

    pub fn no_retries() -> Self {
        Self { max_retries: 0, ..Self::immediate() }
    }

    /// Delay before retry number `retry` (0-based), jitter applied.
    fn delay(&self, retry: u32) -> Duration {
        let base = self.base_delay_ms as f64 * self.multiplier.powi(retry as i32);
        let capped = base.min(self.max_delay_ms as f64);
        let jittered = if self.jitter > 0.0 {
            let factor = rand::rng().random_range(1.0 - self.jitter..=1.0 + self.jitter);
            capped * factor
        } else {
            capped
        };
        Duration::from_millis(jittered.max(0.0) as u64)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RetryError {
    #[error("non-retryable failure: {0}")]
    NonRetryable(ProviderFault),
    #[error("retry budget exhausted after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: ProviderFault },
}

/// Run `action` until it succeeds, a non-retryable fault surfaces, or the
/// budget is spent. Returns the value and the number of attempts made.
pub fn execute_with_retry<T>(
    policy: &RetryPolicy,
    action: impl FnMut(u32) -> Result<T, ProviderFault>,
) -> Result<(T, u32), RetryError> {
    execute_with_sleeper(policy, &mut |d| std::thread::sleep(d), action)
}

pub(crate) fn execute_with_sleeper<T>(
    policy: &RetryPolicy,
    sleep: &mut dyn FnMut(Duration),
    mut action: impl FnMut(u32) -> Result<T, ProviderFault>,
) -> Result<(T, u32), RetryError> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        match action(attempts) {
            Ok(value) => return Ok((value, attempts)),
            Err(fault) if !policy.retryable.permits(&fault) => {
                return Err(RetryError::NonRetryable(fault));
            }
            Err(fault) => {
                if attempts > policy.max_retries {
                    return Err(RetryError::Exhausted { attempts, last: fault });
                }
                let delay = policy.delay(attempts - 1);
                if !delay.is_zero() {
                    sleep(delay);
                }
            }
        }
    }
}
