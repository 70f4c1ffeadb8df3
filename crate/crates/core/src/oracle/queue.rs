use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::{LabelBackend, LabelQuery, RunStatus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmitError {
    /// Labels must be `+1` or `-1`.
    InvalidLabel(i64),
    UnknownId(u64),
    /// The id was already answered with the other label.
    Conflict(u64),
}

impl std::fmt::Display for SubmitError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SubmitError::InvalidLabel(l) => write!(f, "label must be +1 or -1, got {l}"),
            SubmitError::UnknownId(id) => write!(f, "no pending query with id {id}"),
            SubmitError::Conflict(id) => write!(f, "query {id} was already answered differently"),
        }
    }
}

#[derive(Default)]
struct State {
    pending: BTreeMap<u64, LabelQuery>,
    /// Answers not yet collected by the trainer.
    answers: HashMap<u64, i8>,
    /// Every answer ever given, for idempotent resubmission.
    resolved: HashMap<u64, i8>,
    status: RunStatus,
}

/// Pending queries shared between the trainer and HTTP clients. With a path,
/// the pending list is rewritten to disk on every change and reloaded on open.
pub struct LabelQueue {
    state: Mutex<State>,
    answered: Condvar,
    path: Option<PathBuf>,
}

impl LabelQueue {
    pub fn new() -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::default(),
            answered: Condvar::new(),
            path: None,
        })
    }

    pub fn persistent(path: impl Into<PathBuf>) -> Result<Arc<Self>> {
        let path = path.into();
        let mut state = State::default();
        if path.exists() {
            let pending: Vec<LabelQuery> = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            state.pending = pending.into_iter().map(|q| (q.id, q)).collect();
        }
        Ok(Arc::new(Self {
            state: Mutex::new(state),
            answered: Condvar::new(),
            path: Some(path),
        }))
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn persist(&self, state: &State) -> Result<()> {
        if let Some(path) = &self.path {
            let pending: Vec<&LabelQuery> = state.pending.values().collect();
            let tmp = path.with_extension("tmp");
            std::fs::write(&tmp, serde_json::to_vec_pretty(&pending)?)?;
            std::fs::rename(tmp, path)?;
        }
        Ok(())
    }

    pub fn pending(&self) -> Vec<LabelQuery> {
        self.lock().pending.values().cloned().collect()
    }

    pub fn status(&self) -> RunStatus {
        self.lock().status
    }

    pub fn set_status(&self, status: RunStatus) {
        self.lock().status = status;
    }

    pub fn submit(&self, id: u64, label: i64) -> std::result::Result<(), SubmitError> {
        if label != 1 && label != -1 {
            return Err(SubmitError::InvalidLabel(label));
        }
        let label = label as i8;
        let mut state = self.lock();
        if let Some(&previous) = state.resolved.get(&id) {
            return if previous == label {
                Ok(())
            } else {
                Err(SubmitError::Conflict(id))
            };
        }
        if state.pending.remove(&id).is_none() {
            return Err(SubmitError::UnknownId(id));
        }
        state.answers.insert(id, label);
        state.resolved.insert(id, label);
        if let Err(e) = self.persist(&state) {
            log::error!("could not persist the label queue: {e}");
        }
        drop(state);
        self.answered.notify_all();
        Ok(())
    }

    /// Enqueues the queries not already pending or answered, then waits for
    /// all of them.
    fn ask(&self, queries: &[LabelQuery], timeout: Duration) -> Result<Vec<i8>> {
        let mut state = self.lock();
        for q in queries {
            if !state.pending.contains_key(&q.id) && !state.answers.contains_key(&q.id) {
                state.pending.insert(q.id, q.clone());
            }
        }
        self.persist(&state)?;
        let deadline = Instant::now() + timeout;
        loop {
            let missing = queries.iter().filter(|q| !state.answers.contains_key(&q.id)).count();
            if missing == 0 {
                break;
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::OracleTimeout { pending: missing });
            }
            state = self
                .answered
                .wait_timeout(state, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
        Ok(queries
            .iter()
            .map(|q| state.answers.remove(&q.id).expect("answer present"))
            .collect())
    }
}

/// Blocks the trainer until a person answers every query through the queue.
pub struct HumanBackend {
    pub queue: Arc<LabelQueue>,
    pub timeout: Duration,
}

impl LabelBackend for HumanBackend {
    fn label(&mut self, queries: &[LabelQuery]) -> Result<Vec<i8>> {
        self.queue.ask(queries, self.timeout)
    }

    fn publish(&mut self, status: RunStatus) {
        self.queue.set_status(status);
    }
}
