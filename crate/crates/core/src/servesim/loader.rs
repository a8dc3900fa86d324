use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{RequestId, ServeError};
use crate::Millis;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadState {
    Queued,
    Loading,
    Done,
    Rejected,
}

impl LoadState {
    pub fn is_terminal(self) -> bool {
        matches!(self, LoadState::Done | LoadState::Rejected)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadJob {
    pub job_id: usize,
    pub revision_id: String,
    pub state: LoadState,
    pub waiters: Vec<RequestId>,
    /// Set when background prewarm asked for this load.
    pub prewarm: bool,
    pub enqueue_ms: Millis,
    /// When the job was admitted to the loading set.
    pub start_ms: Option<Millis>,
    /// When it took the engine lock.
    pub activate_ms: Option<Millis>,
    pub end_ms: Option<Millis>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Enqueued {
    Joined(usize),
    Loading(usize),
    Queued(usize),
}

impl Enqueued {
    pub fn job_id(self) -> usize {
        match self {
            Enqueued::Joined(j) | Enqueued::Loading(j) | Enqueued::Queued(j) => j,
        }
    }
}

/// Single-flight cold loader with `max_inflight` loading and `queue_depth`
/// queued jobs.
#[derive(Clone, Debug)]
pub struct ColdLoader {
    pub max_inflight: usize,
    pub queue_depth: usize,
    jobs: Vec<LoadJob>,
    live: BTreeMap<String, usize>,
    loading: VecDeque<usize>,
    queued: VecDeque<usize>,
    pub peak_loading: usize,
    pub peak_queued: usize,
    pub rejected: usize,
}

impl ColdLoader {
    pub fn new(max_inflight: usize, queue_depth: usize) -> Self {
        Self {
            max_inflight,
            queue_depth,
            jobs: Vec::new(),
            live: BTreeMap::new(),
            loading: VecDeque::new(),
            queued: VecDeque::new(),
            peak_loading: 0,
            peak_queued: 0,
            rejected: 0,
        }
    }

    pub fn jobs(&self) -> &[LoadJob] {
        &self.jobs
    }

    pub fn job(&self, id: usize) -> &LoadJob {
        &self.jobs[id]
    }

    pub fn live_job(&self, revision: &str) -> Option<&LoadJob> {
        self.live.get(revision).map(|&j| &self.jobs[j])
    }

    pub fn loading_count(&self) -> usize {
        self.loading.len()
    }

    pub fn queued_count(&self) -> usize {
        self.queued.len()
    }

    pub fn is_idle(&self) -> bool {
        self.loading.is_empty() && self.queued.is_empty()
    }

    /// Oldest admitted job still waiting for the engine lock.
    pub fn next_activation(&self) -> Option<usize> {
        self.loading.iter().copied().find(|&j| self.jobs[j].activate_ms.is_none())
    }

    pub fn enqueue(
        &mut self,
        revision: &str,
        waiter: Option<RequestId>,
        prewarm: bool,
        now: Millis,
        retry_after_ms: Millis,
    ) -> Result<Enqueued, ServeError> {
        if let Some(&j) = self.live.get(revision) {
            let job = &mut self.jobs[j];
            job.waiters.extend(waiter);
            job.prewarm |= prewarm;
            return Ok(Enqueued::Joined(j));
        }
        let state = if self.loading.len() < self.max_inflight {
            LoadState::Loading
        } else if self.queued.len() < self.queue_depth {
            LoadState::Queued
        } else {
            self.rejected += 1;
            return Err(ServeError::ColdLoadRejected { revision: revision.into(), retry_after_ms });
        };
        let id = self.jobs.len();
        self.jobs.push(LoadJob {
            job_id: id,
            revision_id: revision.into(),
            state,
            waiters: waiter.into_iter().collect(),
            prewarm,
            enqueue_ms: now,
            start_ms: (state == LoadState::Loading).then_some(now),
            activate_ms: None,
            end_ms: None,
        });
        self.live.insert(revision.into(), id);
        if state == LoadState::Loading {
            self.loading.push_back(id);
            self.peak_loading = self.peak_loading.max(self.loading.len());
            Ok(Enqueued::Loading(id))
        } else {
            self.queued.push_back(id);
            self.peak_queued = self.peak_queued.max(self.queued.len());
            Ok(Enqueued::Queued(id))
        }
    }

    pub(crate) fn mark_activating(&mut self, id: usize, now: Millis) {
        self.jobs[id].activate_ms = Some(now);
    }

    /// Ends a loading job and promotes the oldest queued one.
    pub(crate) fn finish(&mut self, id: usize, ok: bool, now: Millis) -> &LoadJob {
        let job = &mut self.jobs[id];
        job.state = if ok { LoadState::Done } else { LoadState::Rejected };
        job.end_ms = Some(now);
        self.live.remove(&job.revision_id);
        self.loading.retain(|&j| j != id);
        while self.loading.len() < self.max_inflight {
            let Some(next) = self.queued.pop_front() else { break };
            self.jobs[next].state = LoadState::Loading;
            self.jobs[next].start_ms = Some(now);
            self.loading.push_back(next);
        }
        &self.jobs[id]
    }
}
