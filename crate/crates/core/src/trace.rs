//! Per-event trace records emitted while diagnosing a case.

use serde::{Deserialize, Serialize};

use crate::agent::{ProbeReason, RolloutStop, Verdict};
use crate::attribution::{LikelihoodSource, Outcome};
use crate::diagnosis::{CaseStop, Ordering};
use crate::judge::Fds;
use crate::probe::{Branch, Rejection};
use crate::world::StateId;

pub const TRACE_SCHEMA: &str = "diag-trace/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Rollout {
        steps: usize,
        stop: RolloutStop,
        final_state: StateId,
        verdict: Verdict,
    },
    Fds {
        round: u32,
        fds: Box<Fds>,
    },
    Pool {
        round: u32,
        counts: [usize; 3],
        branches: Vec<Branch>,
    },
    Selection {
        round: u32,
        ordering: Ordering,
        selected: Vec<String>,
        executed_order: Vec<String>,
        rejected: Vec<(String, Rejection)>,
    },
    Probe {
        round: u32,
        branch: Box<Branch>,
        eig: f64,
        outcome: Outcome,
        reason: ProbeReason,
        fragment_steps: usize,
        final_state: StateId,
    },
    Update {
        round: u32,
        branch_id: String,
        p_before: f64,
        p_after: f64,
        source: LikelihoodSource,
    },
    Retry {
        attempt: u32,
        steps: usize,
        verdict: Verdict,
    },
    Stop {
        reason: CaseStop,
        p_end: f64,
        verdict: Verdict,
    },
}

/// One line of a method's trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schema_id: String,
    pub method: String,
    pub case_id: u64,
    pub seq: u32,
    #[serde(flatten)]
    pub event: TraceEvent,
}

impl TraceRecord {
    pub fn wrap(method: &str, case_id: u64, events: Vec<TraceEvent>) -> Vec<TraceRecord> {
        events
            .into_iter()
            .enumerate()
            .map(|(i, event)| TraceRecord {
                schema_id: TRACE_SCHEMA.into(),
                method: method.into(),
                case_id,
                seq: i as u32,
                event,
            })
            .collect()
    }
}
