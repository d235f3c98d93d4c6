use core::time::Duration;

use serde::{Deserialize, Serialize};

/// Growing delay between successive "not ready" answers:
/// `delay(n) = min(initial * factor^n, cap)`, rounded to the nearest
/// millisecond.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackoffPolicy {
    pub initial_ms: u64,
    pub factor: f64,
    pub cap_ms: u64,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        BackoffPolicy { initial_ms: 200, factor: 1.6, cap_ms: 5_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum BackoffError {
    #[error("initial delay must be positive")]
    ZeroInitial,
    #[error("growth factor must be greater than 1")]
    FactorTooSmall,
    #[error("cap must be at least the initial delay")]
    CapBelowInitial,
}

impl BackoffPolicy {
    pub fn validate(&self) -> Result<(), BackoffError> {
        if self.initial_ms == 0 {
            return Err(BackoffError::ZeroInitial);
        }
        if !(self.factor > 1.0) || !self.factor.is_finite() {
            return Err(BackoffError::FactorTooSmall);
        }
        if self.cap_ms < self.initial_ms {
            return Err(BackoffError::CapBelowInitial);
        }
        Ok(())
    }

    /// Delay in whole milliseconds after the `n`-th consecutive miss
    /// (0-based).
    ///
    /// Below the cap each step is at least 1 ms longer than the previous
    /// one, so the sequence stays strictly increasing even when rounding
    /// would flatten tiny delays.
    pub fn delay_ms(&self, n: u32) -> u64 {
        let cap = self.cap_ms;
        let mut exact = self.initial_ms as f64;
        let mut prev = round_ms(exact).min(cap);
        for _ in 0..n {
            if prev >= cap {
                return cap;
            }
            exact *= self.factor;
            prev = round_ms(exact).max(prev + 1).min(cap);
        }
        prev
    }

    pub fn delay(&self, n: u32) -> Duration {
        Duration::from_millis(self.delay_ms(n))
    }
}

fn round_ms(x: f64) -> u64 {
    if x >= u64::MAX as f64 {
        u64::MAX
    } else {
        (x + 0.5) as u64
    }
}
