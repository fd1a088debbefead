//! Asynchronous job registry with replayable event history.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use aspectree::events::{BuildEvent, TrainPhase};
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    Split,
    Generate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Optimization steps completed so far, summed over every training run
    /// of the job. Never decreases.
    pub step: u64,
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobHandle {
    pub id: String,
    pub kind: JobKind,
    pub tree_ids: Vec<String>,
    pub state: JobState,
    pub progress: Progress,
    pub result: Option<serde_json::Value>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum JobEvent {
    State { state: JobState },
    Progress { step: u64, loss: f64 },
    Build { event: BuildEvent },
}

struct Entry {
    handle: JobHandle,
    history: Vec<JobEvent>,
    run_steps: BTreeMap<(u64, u8), usize>,
    notify: watch::Sender<usize>,
}

#[derive(Clone, Default)]
pub struct JobRegistry {
    inner: Arc<Mutex<BTreeMap<String, Entry>>>,
    next: Arc<AtomicU64>,
}

impl JobRegistry {
    pub fn create(&self, kind: JobKind, tree_ids: Vec<String>) -> JobHandle {
        let id = format!("job-{}", self.next.fetch_add(1, Ordering::Relaxed) + 1);
        let handle = JobHandle {
            id: id.clone(),
            kind,
            tree_ids,
            state: JobState::Queued,
            progress: Progress::default(),
            result: None,
            error: None,
        };
        let (notify, _) = watch::channel(1);
        let entry = Entry {
            handle: handle.clone(),
            history: vec![JobEvent::State { state: JobState::Queued }],
            run_steps: BTreeMap::new(),
            notify,
        };
        self.inner.lock().expect("job registry poisoned").insert(id, entry);
        handle
    }

    pub fn get(&self, id: &str) -> Option<JobHandle> {
        self.inner.lock().expect("job registry poisoned").get(id).map(|e| e.handle.clone())
    }

    fn with_entry(&self, id: &str, f: impl FnOnce(&mut Entry)) {
        let mut jobs = self.inner.lock().expect("job registry poisoned");
        if let Some(e) = jobs.get_mut(id) {
            if e.handle.state.is_terminal() {
                return;
            }
            f(e);
            e.notify.send_replace(e.history.len());
        }
    }

    pub fn set_running(&self, id: &str) {
        self.with_entry(id, |e| {
            e.handle.state = JobState::Running;
            e.history.push(JobEvent::State { state: JobState::Running });
        });
    }

    pub fn finish(&self, id: &str, result: Result<serde_json::Value, String>) {
        self.with_entry(id, |e| {
            let state = match result {
                Ok(v) => {
                    e.handle.result = Some(v);
                    JobState::Done
                }
                Err(msg) => {
                    e.handle.error = Some(msg);
                    JobState::Failed
                }
            };
            e.handle.state = state;
            e.history.push(JobEvent::State { state });
        });
    }

    pub fn record(&self, id: &str, event: &BuildEvent) {
        self.with_entry(id, |e| {
            if let BuildEvent::TrainProgress { seed, phase, step, loss, .. } = event {
                let key = (*seed, matches!(phase, TrainPhase::Final) as u8);
                // Final training continues the candidate run, so its step
                // counter starts where the candidate stopped.
                let start = if key.1 == 1 { e.run_steps.get(&(*seed, 0)).copied().unwrap_or(0) } else { 0 };
                let last = e.run_steps.entry(key).or_insert(start);
                let delta = step.saturating_sub(*last);
                *last = (*last).max(*step);
                e.handle.progress.step += delta as u64;
                e.handle.progress.loss = Some(*loss);
                e.history.push(JobEvent::Progress { step: e.handle.progress.step, loss: *loss });
            } else {
                e.history.push(JobEvent::Build { event: event.clone() });
            }
        });
    }

    /// Events from `from` onward, whether the job has ended, and a receiver
    /// that fires when more events arrive.
    pub fn events_since(&self, id: &str, from: usize) -> Option<(Vec<JobEvent>, bool, watch::Receiver<usize>)> {
        let jobs = self.inner.lock().expect("job registry poisoned");
        let e = jobs.get(id)?;
        let events = e.history.get(from..).map(<[JobEvent]>::to_vec).unwrap_or_default();
        Some((events, e.handle.state.is_terminal(), e.notify.subscribe()))
    }
}
