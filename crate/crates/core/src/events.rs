use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::report::ConsistencyReport;
use crate::tree::SplitDecision;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainPhase {
    Candidate,
    Final,
}

/// Progress of a build, emitted to CLI progress output and service job streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum BuildEvent {
    SplitStarted { node_id: u32 },
    TrainProgress { node_id: u32, seed: u64, phase: TrainPhase, step: usize, loss: f64 },
    CandidateScored { node_id: u32, seed: u64, report: ConsistencyReport },
    CandidateFailed { node_id: u32, seed: u64, reason: String },
    SeedChosen { node_id: u32, seed: u64, objective: f64 },
    SplitFinished { node_id: u32, decision: SplitDecision, children: Vec<u32> },
}

pub type EventSink = Arc<dyn Fn(&BuildEvent) + Send + Sync>;

/// Sink that drops every event.
pub fn discard() -> EventSink {
    Arc::new(|_| {})
}
