//! Double-buffered staging: which part may be staged next, and a replay
//! checker for recorded job event logs.
//!
//! At most two parts of a job are resident (staging, ready, or being
//! served) at once, parts start staging in index order, and part `i + 2`
//! starts only after part `i` has been deleted or has failed.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::part::PartState;

/// Number of parts a job may hold on server disk at once.
pub const BUFFER_SLOTS: usize = 2;

/// The next part allowed to begin staging, if any.
pub fn next_to_stage(states: &[PartState]) -> Option<usize> {
    let next = states.iter().position(|s| *s == PartState::Pending)?;
    let resident = states.iter().filter(|s| s.is_resident()).count();
    if resident >= BUFFER_SLOTS {
        return None;
    }
    if next >= BUFFER_SLOTS && !states[next - BUFFER_SLOTS].is_terminal() {
        return None;
    }
    Some(next)
}

/// Every part has reached a terminal state.
pub fn is_finished(states: &[PartState]) -> bool {
    states.iter().all(|s| s.is_terminal())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageEventKind {
    StagingBegin,
    Ready,
    Served,
    Deleted,
    Failed,
}

impl StageEventKind {
    pub fn target_state(self) -> PartState {
        match self {
            StageEventKind::StagingBegin => PartState::Staging,
            StageEventKind::Ready => PartState::Ready,
            StageEventKind::Served => PartState::Served,
            StageEventKind::Deleted => PartState::Deleted,
            StageEventKind::Failed => PartState::Failed,
        }
    }
}

/// One recorded state change. `seq` is a strictly increasing sequence
/// number giving the total order of a job's log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEvent {
    pub seq: u64,
    pub part: usize,
    pub kind: StageEventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    UnknownPart { seq: u64, part: usize },
    SequenceNotIncreasing { seq: u64 },
    IllegalTransition { seq: u64, part: usize, from: PartState, to: PartState },
    BufferOverflow { seq: u64, resident: usize },
    OutOfOrder { seq: u64, expected: usize, got: usize },
    GateViolation { seq: u64, part: usize, blocker: usize, blocker_state: PartState },
}

/// Replays a job's event log and reports every breach of the staging
/// rules. An empty result means the log is clean.
pub fn check_event_log(part_count: usize, events: &[StageEvent]) -> Vec<Violation> {
    let mut states = vec![PartState::Pending; part_count];
    let mut violations = Vec::new();
    let mut next_stage = 0usize;
    let mut last_seq = None;

    for ev in events {
        if last_seq.is_some_and(|s| ev.seq <= s) {
            violations.push(Violation::SequenceNotIncreasing { seq: ev.seq });
        }
        last_seq = Some(ev.seq);
        let Some(from) = states.get(ev.part).copied() else {
            violations.push(Violation::UnknownPart { seq: ev.seq, part: ev.part });
            continue;
        };
        let to = ev.kind.target_state();
        if !from.can_transition(to) {
            violations.push(Violation::IllegalTransition { seq: ev.seq, part: ev.part, from, to });
        }
        if ev.kind == StageEventKind::StagingBegin {
            if ev.part != next_stage {
                violations.push(Violation::OutOfOrder { seq: ev.seq, expected: next_stage, got: ev.part });
            }
            next_stage = ev.part + 1;
            if ev.part >= BUFFER_SLOTS {
                let blocker = ev.part - BUFFER_SLOTS;
                if !states[blocker].is_terminal() {
                    violations.push(Violation::GateViolation {
                        seq: ev.seq,
                        part: ev.part,
                        blocker,
                        blocker_state: states[blocker],
                    });
                }
            }
        } else if from == PartState::Pending && to == PartState::Failed {
            // a part that fails before staging still consumes its turn
            next_stage = next_stage.max(ev.part + 1);
        }
        states[ev.part] = to;
        let resident = states.iter().filter(|s| s.is_resident()).count();
        if resident > BUFFER_SLOTS {
            violations.push(Violation::BufferOverflow { seq: ev.seq, resident });
        }
    }
    violations
}

/// Largest number of simultaneously resident parts seen while replaying
/// the log.
pub fn max_resident(part_count: usize, events: &[StageEvent]) -> usize {
    let mut states = vec![PartState::Pending; part_count];
    let mut max = 0;
    for ev in events {
        if let Some(s) = states.get_mut(ev.part) {
            *s = ev.kind.target_state();
        }
        max = max.max(states.iter().filter(|s| s.is_resident()).count());
    }
    max
}

#[cfg(test)]
mod tests {
    use super::StageEventKind as K;
    use super::*;
    use PartState::*;

    fn log(entries: &[(usize, StageEventKind)]) -> Vec<StageEvent> {
        entries
            .iter()
            .enumerate()
            .map(|(i, &(part, kind))| StageEvent { seq: i as u64, part, kind })
            .collect()
    }

    #[test]
    fn gate_allows_two_then_waits_for_deletion() {
        assert_eq!(next_to_stage(&[Pending, Pending, Pending]), Some(0));
        assert_eq!(next_to_stage(&[Staging, Pending, Pending]), Some(1));
        assert_eq!(next_to_stage(&[Ready, Staging, Pending]), None);
        assert_eq!(next_to_stage(&[Served, Ready, Pending]), None);
        assert_eq!(next_to_stage(&[Deleted, Ready, Pending]), Some(2));
        assert_eq!(next_to_stage(&[Failed, Ready, Pending]), Some(2));
        assert_eq!(next_to_stage(&[Deleted, Deleted, Deleted]), None);
    }

    #[test]
    fn single_part_job_uses_one_buffer() {
        assert_eq!(next_to_stage(&[Pending]), Some(0));
        assert_eq!(next_to_stage(&[Ready]), None);
    }

    #[test]
    fn clean_log_has_no_violations() {
        let events = log(&[
            (0, K::StagingBegin),
            (0, K::Ready),
            (1, K::StagingBegin),
            (0, K::Served),
            (0, K::Deleted),
            (2, K::StagingBegin),
            (1, K::Failed),
            (2, K::Ready),
            (2, K::Served),
            (2, K::Deleted),
        ]);
        assert!(check_event_log(3, &events).is_empty());
        assert_eq!(max_resident(3, &events), 2);
    }

    #[test]
    fn detects_gate_and_order_breaches() {
        let events = log(&[(0, K::StagingBegin), (1, K::StagingBegin), (2, K::StagingBegin)]);
        let v = check_event_log(3, &events);
        assert!(v.contains(&Violation::GateViolation { seq: 2, part: 2, blocker: 0, blocker_state: Staging }));
        assert!(v.contains(&Violation::BufferOverflow { seq: 2, resident: 3 }));

        let v = check_event_log(3, &log(&[(1, K::StagingBegin)]));
        assert_eq!(v, [Violation::OutOfOrder { seq: 0, expected: 0, got: 1 }]);

        let v = check_event_log(1, &log(&[(0, K::Ready)]));
        assert!(matches!(v[0], Violation::IllegalTransition { .. }));
    }
}
