use core::fmt;

use serde::{Deserialize, Serialize};

/// Lifecycle of one part of a download job.
///
/// `Pending -> Staging -> Ready -> Served -> Deleted`, and any live state may
/// drop to `Failed`. `Deleted` and `Failed` are terminal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartState {
    Pending,
    Staging,
    Ready,
    Served,
    Deleted,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal part transition {from} -> {to}")]
pub struct IllegalTransition {
    pub from: PartState,
    pub to: PartState,
}

impl PartState {
    pub fn as_str(self) -> &'static str {
        match self {
            PartState::Pending => "pending",
            PartState::Staging => "staging",
            PartState::Ready => "ready",
            PartState::Served => "served",
            PartState::Deleted => "deleted",
            PartState::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Option<PartState> {
        [
            PartState::Pending,
            PartState::Staging,
            PartState::Ready,
            PartState::Served,
            PartState::Deleted,
            PartState::Failed,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, PartState::Deleted | PartState::Failed)
    }

    /// Occupies one of the two staging buffers.
    pub fn is_resident(self) -> bool {
        matches!(self, PartState::Staging | PartState::Ready | PartState::Served)
    }

    pub fn can_transition(self, to: PartState) -> bool {
        use PartState::*;
        matches!(
            (self, to),
            (Pending, Staging) | (Staging, Ready) | (Ready, Served) | (Served, Deleted)
        ) || (to == Failed && !self.is_terminal())
    }

    pub fn transition(self, to: PartState) -> Result<PartState, IllegalTransition> {
        if self.can_transition(to) {
            Ok(to)
        } else {
            Err(IllegalTransition { from: self, to })
        }
    }
}

impl fmt::Display for PartState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::PartState::*;
    use super::*;

    const ALL: [PartState; 6] = [Pending, Staging, Ready, Served, Deleted, Failed];

    #[test]
    fn happy_path_is_legal() {
        let mut s = Pending;
        for next in [Staging, Ready, Served, Deleted] {
            s = s.transition(next).unwrap();
        }
        assert_eq!(s, Deleted);
    }

    #[test]
    fn only_listed_transitions_allowed() {
        let legal = [
            (Pending, Staging),
            (Staging, Ready),
            (Ready, Served),
            (Served, Deleted),
            (Pending, Failed),
            (Staging, Failed),
            (Ready, Failed),
            (Served, Failed),
        ];
        for from in ALL {
            for to in ALL {
                assert_eq!(from.can_transition(to), legal.contains(&(from, to)), "{from} -> {to}");
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for s in ALL {
            assert_eq!(PartState::parse(s.as_str()), Some(s));
        }
    }
}
