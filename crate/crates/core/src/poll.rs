//! Decision logic for fetching one part: poll, back off, fetch, or give up.
//!
//! The driver (which owns the network and the clock) reports what it saw
//! and performs the returned step. Keeping the policy here makes the exact
//! sleep sequence testable without a server or wall-clock time.

use core::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backoff::BackoffPolicy;

/// What a status request told us about the part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservedStatus {
    /// Pending or still staging.
    NotReady,
    Ready,
    /// Already served and deleted.
    Gone,
    /// Server-side staging failed.
    Failed,
    /// No answer (connection or transport error).
    Unreachable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbandonCause {
    MaxTries,
    Gone,
    Failed,
    Unreachable,
    FetchRetries,
    Extraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PollStep {
    /// Download the archive now.
    Fetch,
    /// Sleep, then ask again.
    PollAfter(Duration),
    /// Ask again without waiting.
    PollNow,
    /// Sleep, then give up on the part.
    AbandonAfter(Duration, AbandonCause),
    Abandon(AbandonCause),
}

#[derive(Debug, Clone)]
pub struct PartPoller {
    policy: BackoffPolicy,
    max_tries: u32,
    misses: u32,
    fetch_failures: u32,
    polls: u32,
}

impl PartPoller {
    pub fn new(policy: BackoffPolicy, max_tries: u32) -> Self {
        PartPoller { policy, max_tries: max_tries.max(1), misses: 0, fetch_failures: 0, polls: 0 }
    }

    /// Status requests observed so far.
    pub fn polls(&self) -> u32 {
        self.polls
    }

    pub fn on_status(&mut self, status: ObservedStatus) -> PollStep {
        self.polls += 1;
        match status {
            ObservedStatus::Ready => {
                // a positive answer resets the attempt counter and backoff
                self.misses = 0;
                PollStep::Fetch
            }
            ObservedStatus::Gone => PollStep::Abandon(AbandonCause::Gone),
            ObservedStatus::Failed => PollStep::Abandon(AbandonCause::Failed),
            ObservedStatus::NotReady | ObservedStatus::Unreachable => {
                let delay = self.policy.delay(self.misses);
                self.misses += 1;
                if self.misses >= self.max_tries {
                    let cause = if status == ObservedStatus::Unreachable {
                        AbandonCause::Unreachable
                    } else {
                        AbandonCause::MaxTries
                    };
                    PollStep::AbandonAfter(delay, cause)
                } else {
                    PollStep::PollAfter(delay)
                }
            }
        }
    }

    /// The archive transfer broke off before completing. Fetch failures
    /// are bounded by `max_tries` separately, since every retry follows a
    /// positive status that resets the poll counter.
    pub fn on_fetch_interrupted(&mut self) -> PollStep {
        self.fetch_failures += 1;
        if self.fetch_failures >= self.max_tries {
            PollStep::Abandon(AbandonCause::FetchRetries)
        } else {
            PollStep::PollNow
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::vec::Vec;

    fn ms(v: u64) -> Duration {
        Duration::from_millis(v)
    }

    /// Drives the poller against a scripted status sequence and returns
    /// the sleeps taken and how it ended.
    fn run(script: &[ObservedStatus], max_tries: u32) -> (Vec<u64>, PollStep) {
        let mut p = PartPoller::new(BackoffPolicy::default(), max_tries);
        let mut sleeps = Vec::new();
        for &s in script {
            match p.on_status(s) {
                PollStep::PollAfter(d) => sleeps.push(d.as_millis() as u64),
                PollStep::AbandonAfter(d, c) => {
                    sleeps.push(d.as_millis() as u64);
                    return (sleeps, PollStep::Abandon(c));
                }
                other => return (sleeps, other),
            }
        }
        panic!("script exhausted");
    }

    #[test]
    fn never_ready_abandons_after_max_tries() {
        let (sleeps, end) = run(&[ObservedStatus::NotReady; 10], 5);
        assert_eq!(sleeps, [200, 320, 512, 819, 1311]);
        assert_eq!(end, PollStep::Abandon(AbandonCause::MaxTries));
    }

    #[test]
    fn ready_first_needs_no_sleep() {
        let (sleeps, end) = run(&[ObservedStatus::Ready], 5);
        assert!(sleeps.is_empty());
        assert_eq!(end, PollStep::Fetch);
    }

    #[test]
    fn positive_status_resets_backoff() {
        let mut p = PartPoller::new(BackoffPolicy::default(), 5);
        assert_eq!(p.on_status(ObservedStatus::NotReady), PollStep::PollAfter(ms(200)));
        assert_eq!(p.on_status(ObservedStatus::NotReady), PollStep::PollAfter(ms(320)));
        assert_eq!(p.on_status(ObservedStatus::Ready), PollStep::Fetch);
        assert_eq!(p.on_fetch_interrupted(), PollStep::PollNow);
        assert_eq!(p.on_status(ObservedStatus::NotReady), PollStep::PollAfter(ms(200)));
        assert_eq!(p.polls(), 4);
    }

    #[test]
    fn terminal_answers_abandon_immediately() {
        let mut p = PartPoller::new(BackoffPolicy::default(), 5);
        assert_eq!(p.on_status(ObservedStatus::Gone), PollStep::Abandon(AbandonCause::Gone));
        assert_eq!(p.on_status(ObservedStatus::Failed), PollStep::Abandon(AbandonCause::Failed));
    }

    #[test]
    fn unreachable_counts_as_miss() {
        let (sleeps, end) = run(&[ObservedStatus::Unreachable; 3], 3);
        assert_eq!(sleeps, [200, 320, 512]);
        assert_eq!(end, PollStep::Abandon(AbandonCause::Unreachable));
    }

    #[test]
    fn fetch_failures_are_bounded() {
        let mut p = PartPoller::new(BackoffPolicy::default(), 2);
        assert_eq!(p.on_fetch_interrupted(), PollStep::PollNow);
        assert_eq!(p.on_fetch_interrupted(), PollStep::Abandon(AbandonCause::FetchRetries));
    }
}
